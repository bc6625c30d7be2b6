"""Dataset generation, storage, and loading.

A dataset directory holds ``manifest.json`` plus ``records.bin``. The
manifest carries the format tag, the generator configuration, the scenario
split, and one entry per sample with its byte offset into the record file,
its label, and enough channel metadata (per-path geometry and shadowing
draws at the label frame) to re-derive the label independently. The record
file is the samples' tensor blobs back to back: the image stack, then the
per-frame pointclouds, per-frame radar detections, GPS track, and RSSI
trace, in that order.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .channel import PropagationPath
from .scenegen import (ScenarioConfig, ScenarioTrace, frame_label, render_frame,
                       scenario_config_dict, simulate_scenario, splitmix64)
from .serial import tensor_from_bytes, tensor_to_bytes

DATASET_FORMAT = "MMTD-1"
MANIFEST_NAME = "manifest.json"
RECORDS_NAME = "records.bin"
VAL_FRACTION = 0.1


def scenario_seed(master_seed: int, index: int) -> int:
    return splitmix64(master_seed, index)


def split_scenarios(num_scenarios: int, master_seed: int) -> dict[int, str]:
    """Deterministic 90/10 scenario-level split. Whole scenarios go to one
    side so overlapping windows never straddle the split."""
    order = np.random.default_rng(splitmix64(master_seed, num_scenarios)).permutation(
        num_scenarios)
    n_val = max(1, round(num_scenarios * VAL_FRACTION)) if num_scenarios > 1 else 0
    val = set(int(i) for i in order[:n_val])
    return {i: "val" if i in val else "train" for i in range(num_scenarios)}


def _path_meta(path: PropagationPath, xi: float) -> dict:
    return {"azimuth": path.azimuth, "elevation": path.elevation,
            "length": path.length, "los": path.is_los, "xi": xi}


def _sample_record(frames_payload: list[dict]) -> bytes:
    chunks = [tensor_to_bytes(np.stack([f["image"] for f in frames_payload])
                              .astype(np.float32))]
    for key in ("pointcloud", "radar"):
        chunks += [tensor_to_bytes(f[key]) for f in frames_payload]
    chunks.append(tensor_to_bytes(np.stack([f["gps"] for f in frames_payload])))
    chunks.append(tensor_to_bytes(np.stack([f["rssi"] for f in frames_payload])))
    return b"".join(chunks)


def build_dataset(config: ScenarioConfig, out_dir: str, num_scenarios: int,
                  seed: int) -> dict:
    """Generate ``num_scenarios`` scenarios and write the dataset directory.

    Every scenario of ``frames`` frames yields ``frames - tau`` windows: the
    window ending at frame t is labelled by frame t+1. Returns the manifest.
    """
    os.makedirs(out_dir, exist_ok=True)
    samples = []
    split = split_scenarios(num_scenarios, seed)
    with open(os.path.join(out_dir, RECORDS_NAME), "wb") as fh:
        offset = 0
        for s in range(num_scenarios):
            s_seed = scenario_seed(seed, s)
            trace = simulate_scenario(config, s_seed)
            render_rng = np.random.default_rng(splitmix64(s_seed, 1))
            payloads = [render_frame(f, trace, render_rng) for f in trace.frames]
            for t_end in range(config.tau - 1, config.frames - 1):
                record = _sample_record(payloads[t_end - config.tau + 1:t_end + 1])
                fh.write(record)
                label_frame = trace.frames[t_end + 1]
                samples.append({
                    "offset": offset,
                    "length": len(record),
                    "scenario": s,
                    "t": t_end,
                    "split": split[s],
                    "label": frame_label(label_frame, config),
                    "meta": {
                        "paths": [[_path_meta(p, x) for p, x in zip(per_v, xi_v)]
                                  for per_v, xi_v in zip(label_frame.paths,
                                                         label_frame.xi)],
                        "blocked": label_frame.blocked,
                        "s_opt": label_frame.s_opt,
                        "beam": label_frame.beam_label,
                        "link": label_frame.link,
                    },
                })
                offset += len(record)
    manifest = {
        "format": DATASET_FORMAT,
        "seed": seed,
        "num_scenarios": num_scenarios,
        "scenario_config": scenario_config_dict(config),
        "count": len(samples),
        "samples": samples,
    }
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


def _parse_record(buf: bytes, tau: int) -> dict:
    sample = {}
    sample["image"], pos = tensor_from_bytes(buf, 0)
    for key in ("pointcloud", "radar"):
        arrays = []
        for _ in range(tau):
            arr, pos = tensor_from_bytes(buf, pos)
            arrays.append(arr)
        sample[key] = arrays
    sample["gps"], pos = tensor_from_bytes(buf, pos)
    sample["rssi"], pos = tensor_from_bytes(buf, pos)
    if pos != len(buf):
        raise ValueError(f"record has {len(buf) - pos} trailing bytes")
    return sample


class Dataset:
    """Fully in-memory dataset: raw modality payloads, labels, and metadata.

    ``samples`` is a list of dicts ready for ``preprocess_sample``; ``labels``
    and ``split`` line up with it.
    """

    def __init__(self, manifest: dict, samples: list[dict]):
        self.manifest = manifest
        self.samples = samples
        self.labels = np.array([s["label"] for s in manifest["samples"]])
        self.split = [s["split"] for s in manifest["samples"]]
        self.meta = [s["meta"] for s in manifest["samples"]]

    @property
    def scenario_config(self) -> ScenarioConfig:
        return ScenarioConfig(**{k: tuple(v) if isinstance(v, list) else v
                                 for k, v in self.manifest["scenario_config"].items()})

    def indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.split) if s == split]

    def __len__(self) -> int:
        return len(self.samples)


def load_dataset(path: str) -> Dataset:
    """Read a dataset directory back into memory, validating the manifest
    against the record file as it goes."""
    with open(os.path.join(path, MANIFEST_NAME)) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != DATASET_FORMAT:
        raise ValueError(f"unsupported dataset format {manifest.get('format')!r}, "
                         f"expected {DATASET_FORMAT!r}")
    entries = manifest["samples"]
    if len(entries) != manifest["count"]:
        raise ValueError(f"manifest count {manifest['count']} does not match its "
                         f"{len(entries)} sample entries")
    with open(os.path.join(path, RECORDS_NAME), "rb") as fh:
        blob = fh.read()
    expected = entries[-1]["offset"] + entries[-1]["length"] if entries else 0
    if len(blob) < expected:
        raise ValueError(f"record file truncated: {len(blob)} bytes, "
                         f"manifest expects {expected}")
    tau = manifest["scenario_config"]["tau"]
    samples = []
    prev_end = 0
    for i, entry in enumerate(entries):
        if entry["offset"] != prev_end:
            raise ValueError(f"sample {i} offset {entry['offset']} does not follow "
                             f"previous record end {prev_end}")
        prev_end = entry["offset"] + entry["length"]
        try:
            samples.append(_parse_record(
                blob[entry["offset"]:prev_end], tau))
        except ValueError as exc:
            raise ValueError(f"sample {i} is corrupt: {exc}") from exc
    return Dataset(manifest, samples)


def meta_paths(meta: dict) -> tuple[list[list[PropagationPath]], list[list[float]]]:
    """Rebuild per-vehicle path lists and shadowing draws from sample metadata."""
    paths, xi = [], []
    for per_v in meta["paths"]:
        paths.append([PropagationPath(p["azimuth"], p["elevation"], p["length"],
                                      p["los"]) for p in per_v])
        xi.append([p["xi"] for p in per_v])
    return paths, xi
