"""Model configuration shared by the tokenizers, blocks, and accountant."""

from __future__ import annotations

from dataclasses import dataclass, asdict

# Canonical modality order; token assembly and embeddings index into this.
KINDS = ("image", "pointcloud", "radar", "gps", "rssi")
KIND_IDS = {k: i for i, k in enumerate(KINDS)}

# The conv stacks downsample by 2 four times (stem, pool, two residual
# blocks), so the token grid is the input resolution over 16.
CONV_DOWNSAMPLE = 16


@dataclass
class ModelConfig:
    d: int = 32
    blocks: int = 4
    heads: int = 4
    d_ff: int = 64
    d_router: int = 16
    tau: int = 5
    modalities: tuple[str, ...] = ("image", "pointcloud", "radar", "gps")
    img_hw: int = 64
    bev_hw: int = 64
    bev_x_range: tuple[float, float] = (-52.0, 52.0)
    bev_y_range: tuple[float, float] = (-6.0, 10.0)
    n_rad: int = 8
    conv_width: int = 4
    scalar_hidden: int = 32
    task: str = "beam"
    num_classes: int = 16
    num_vehicles: int = 1
    gamma_prime: float = 1.0
    lam: float = 10.0
    r_min: float | None = None
    gate: str = "raw"
    share_grid_pos: bool = False

    def __post_init__(self):
        self.modalities = tuple(self.modalities)
        self.bev_x_range = tuple(self.bev_x_range)
        self.bev_y_range = tuple(self.bev_y_range)
        if self.d % self.heads:
            raise ValueError(f"embedding dim {self.d} not divisible by {self.heads} heads")
        if self.task not in ("beam", "handover"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.task == "beam" and self.num_classes < 2:
            raise ValueError("beam task needs at least 2 codebook entries")
        unknown = set(self.modalities) - set(KINDS)
        if unknown:
            raise ValueError(f"unknown modalities {sorted(unknown)}")
        if not self.modalities:
            raise ValueError("at least one modality is required")
        if self.tau < 1:
            raise ValueError(f"window length must be >= 1, got {self.tau}")
        for name, hw in (("img_hw", self.img_hw), ("bev_hw", self.bev_hw)):
            if hw % CONV_DOWNSAMPLE:
                raise ValueError(f"{name}={hw} must be divisible by {CONV_DOWNSAMPLE}")
        if self.gate not in ("raw", "sigmoid"):
            raise ValueError(f"unknown gate mode {self.gate!r}")

    @property
    def grid(self) -> int:
        return self.img_hw // CONV_DOWNSAMPLE

    @property
    def bev_grid(self) -> int:
        return self.bev_hw // CONV_DOWNSAMPLE

    @property
    def out_dim(self) -> int:
        return self.num_classes if self.task == "beam" else self.num_vehicles

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def desk_config(task: str = "beam") -> ModelConfig:
    """Small configuration that trains in minutes on one CPU core."""
    if task == "handover":
        return ModelConfig(task="handover",
                           modalities=("image", "pointcloud", "radar", "rssi"))
    return ModelConfig(task="beam")


def paper_config(task: str = "beam") -> ModelConfig:
    """Full-scale configuration; used for token and FLOPs arithmetic only."""
    if task == "handover":
        return ModelConfig(d=64, blocks=8, heads=8, d_ff=256, d_router=32,
                           img_hw=512, bev_hw=512, n_rad=240, task="handover",
                           modalities=("image", "pointcloud", "radar", "rssi"))
    return ModelConfig(d=64, blocks=8, heads=8, d_ff=256, d_router=32,
                       img_hw=512, bev_hw=512, n_rad=300, num_classes=64,
                       modalities=("image", "pointcloud", "radar", "gps"))
