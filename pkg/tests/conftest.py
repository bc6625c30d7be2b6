"""Shared fixtures and sample builders."""

import numpy as np
import pytest

from tokenflow.config import ModelConfig, desk_config
from tokenflow.tokenizers import ModalityFrame, preprocess_sample


def tiny_config(**overrides) -> ModelConfig:
    """Smallest config the conv stacks support; keeps tests quick."""
    base = dict(d=8, blocks=2, heads=2, d_ff=16, d_router=8, tau=2,
                img_hw=32, bev_hw=32, n_rad=3, conv_width=2, scalar_hidden=8,
                num_classes=4)
    base.update(overrides)
    return ModelConfig(**base)


def random_sample(rng: np.random.Generator, config: ModelConfig) -> dict:
    """Raw modality payloads shaped like one dataset sample."""
    sample = {}
    if "image" in config.modalities:
        sample["image"] = rng.random((config.tau, config.img_hw, config.img_hw))
    if "pointcloud" in config.modalities:
        clouds = []
        for _ in range(config.tau):
            p = int(rng.integers(5, 40))
            pts = np.column_stack([
                rng.uniform(*config.bev_x_range, size=p),
                rng.uniform(*config.bev_y_range, size=p),
                rng.uniform(0, 4, size=p),
                rng.random(p),
            ])
            clouds.append(pts)
        sample["pointcloud"] = clouds
    if "radar" in config.modalities:
        sample["radar"] = [rng.normal(size=(int(rng.integers(0, config.n_rad + 2)), 4))
                           for _ in range(config.tau)]
    if "gps" in config.modalities:
        sample["gps"] = rng.uniform(-1, 1, size=(config.tau, 2))
    if "rssi" in config.modalities:
        sample["rssi"] = rng.uniform(-60, -40, size=(config.tau, 1))
    return sample


def random_batch(rng: np.random.Generator, config: ModelConfig, b: int) -> dict:
    pre = [preprocess_sample(random_sample(rng, config), config) for _ in range(b)]
    return {k: np.stack([p[k] for p in pre]) for k in pre[0]}


def frames_of_sample(sample: dict, config: ModelConfig) -> list[ModalityFrame]:
    frames = []
    for kind in config.modalities:
        for t in range(config.tau):
            frames.append(ModalityFrame(kind, np.asarray(sample[kind][t]), t))
    return frames


@pytest.fixture
def desk_beam_config() -> ModelConfig:
    return desk_config("beam")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the acceptance verdict lines after the normal test report."""
    import sys

    for mod in list(sys.modules.values()):
        lines = getattr(mod, "_ACCEPTANCE_LINES", None)
        if lines:
            terminalreporter.write_sep("-", "acceptance criteria")
            for line in lines:
                terminalreporter.write_line(line)
