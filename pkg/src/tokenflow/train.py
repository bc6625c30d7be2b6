"""Training, evaluation, and latency measurement.

The optimizer puts keep-ratio parameters in their own group: a higher
learning rate so the budget settles inside short desk-scale runs, no weight
decay (decay would drag every ratio toward zero regardless of the budget),
and a hard clamp to the ratios' feasible interval after each step.

Ablation modes mirror the training variants used for comparison runs:
``freeze_tokenizers`` locks every tokenizer parameter at init,
``random_routing`` locks the routers and draws uniform scores per step, and
``uniform_ratio`` pins all keep ratios to a constant and drops the budget
penalty from the loss.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, replace

import numpy as np

from . import model as M
from . import tensor as T
from .config import ModelConfig
from .data import Dataset
from .flops import count_flops
from .keepratio import budget_penalty, inference_k, target_ratio_from_flops
from .model import ModelParams, forward_infer, forward_train, named_parameters, predict
from .optim import AdamW
from .scenegen import splitmix64
from .tokenizers import count_tokens, preprocess_sample

log = logging.getLogger("tokenflow")

ABLATIONS = ("none", "freeze_tokenizers", "random_routing", "uniform_ratio")


@dataclass
class TrainSettings:
    lr: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 16
    epochs: int = 15
    ratio_lr_mult: float = 25.0
    lam: float = 10.0
    gamma_prime: float | None = None
    budget_flops: float | None = None
    ablation: str = "none"
    uniform_p: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}, expected one "
                             f"of {ABLATIONS}")


def resolve_gamma_prime(settings: TrainSettings, config: ModelConfig) -> float:
    """Budget as a keep ratio. An absolute FLOPs budget is converted against
    the full-width (r = 1) accountant total."""
    if settings.budget_flops is not None:
        n = count_tokens(config)
        full = count_flops(config, n).total_flops
        r_min = config.r_min if config.r_min is not None else 1.0 / n
        return target_ratio_from_flops(settings.budget_flops, full, r_min)
    if settings.gamma_prime is not None:
        return settings.gamma_prime
    return config.gamma_prime


class Batcher:
    """Preprocess-once sample cache that stacks batches for the model."""

    def __init__(self, dataset: Dataset, config: ModelConfig):
        self.dataset = dataset
        self.config = config
        self._cache: dict[int, dict[str, np.ndarray]] = {}

    def arrays(self, index: int) -> dict[str, np.ndarray]:
        if index not in self._cache:
            self._cache[index] = preprocess_sample(self.dataset.samples[index],
                                                   self.config)
        return self._cache[index]

    def batch(self, indices) -> dict[str, np.ndarray]:
        rows = [self.arrays(i) for i in indices]
        return {kind: np.stack([r[kind] for r in rows])
                for kind in self.config.modalities}

    def targets(self, indices) -> np.ndarray:
        labels = self.dataset.labels[list(indices)]
        if self.config.task == "handover":
            return labels.astype(np.float64).reshape(-1, 1)
        return labels.astype(np.int64)


def _apply_ablation(params: ModelParams, settings: TrainSettings) -> None:
    if settings.ablation == "freeze_tokenizers":
        for name, tensor in named_parameters(params):
            if name.startswith("tokenizer."):
                tensor.requires_grad = False
    elif settings.ablation == "random_routing":
        for name, tensor in named_parameters(params):
            if ".router." in name:
                tensor.requires_grad = False
    elif settings.ablation == "uniform_ratio":
        for ratio in params.keep.ratios:
            ratio.data[:] = settings.uniform_p
            ratio.requires_grad = False


def parameter_groups(params: ModelParams, settings: TrainSettings) -> list[dict]:
    ratio, regular, seen = [], [], set()
    for name, tensor in named_parameters(params):
        if not tensor.requires_grad or id(tensor) in seen:
            continue
        seen.add(id(tensor))
        (ratio if name.startswith("keep.") else regular).append(tensor)
    groups = [{"params": regular, "lr": settings.lr,
               "weight_decay": settings.weight_decay}]
    if ratio:
        groups.append({"params": ratio, "lr": settings.lr * settings.ratio_lr_mult,
                       "weight_decay": 0.0,
                       "clamp": (params.keep.r_min, 1.0)})
    return groups


def train_model(dataset: Dataset, config: ModelConfig, settings: TrainSettings,
                train_indices: list[int] | None = None,
                ) -> tuple[ModelParams, list[dict]]:
    """Run the training loop; returns trained parameters and per-epoch records.

    Raises RuntimeError as soon as the loss goes non-finite, reporting where.
    """
    gamma_prime = resolve_gamma_prime(settings, config)
    config = replace(config, gamma_prime=gamma_prime, lam=settings.lam)
    params = M.init_model(config, np.random.default_rng(splitmix64(settings.seed, 0)))
    _apply_ablation(params, settings)
    optimizer = AdamW(parameter_groups(params, settings))
    shuffle_rng = np.random.default_rng(splitmix64(settings.seed, 1))
    route_rng = np.random.default_rng(splitmix64(settings.seed, 2))
    random_routing = settings.ablation == "random_routing"
    skip_penalty = settings.ablation == "uniform_ratio"

    batcher = Batcher(dataset, config)
    indices = list(train_indices) if train_indices is not None \
        else dataset.indices("train")
    if not indices:
        raise ValueError("no training samples in the dataset split")

    history = []
    for epoch in range(settings.epochs):
        order = np.array(indices)[shuffle_rng.permutation(len(indices))]
        sums = np.zeros(3)
        steps = 0
        for start in range(0, len(order), settings.batch_size):
            chunk = order[start:start + settings.batch_size]
            batch = batcher.batch(chunk)
            targets = batcher.targets(chunk)
            tape = T.Tape()
            try:
                with tape:
                    logits, _, _ = forward_train(
                        batch, params, config,
                        random_rng=route_rng if random_routing else None)
                    task = M.task_loss(logits, targets, config)
                    if skip_penalty:
                        loss = task
                        penalty_val = 0.0
                    else:
                        penalty = budget_penalty(params.keep.ratios,
                                                 config.gamma_prime, config.lam)
                        loss = T.add(task, penalty)
                        penalty_val = float(penalty.data)
            except ValueError as exc:
                # the tensor layer rejects non-finite values at the op that
                # first sees them; surface that as the training abort
                if "non-finite" in str(exc):
                    raise RuntimeError(f"non-finite values in forward pass at "
                                       f"epoch {epoch} step {steps}: {exc}") from exc
                raise
            loss_val = float(loss.data)
            if not math.isfinite(loss_val):
                ratios = [round(v, 4) for v in params.keep.values()]
                raise RuntimeError(
                    f"loss became non-finite ({loss_val}) at epoch {epoch} step "
                    f"{steps}; task={float(task.data)!r} penalty={penalty_val!r} "
                    f"keep ratios={ratios}")
            T.backward(loss, tape)
            optimizer.step()
            sums += (loss_val, float(task.data), penalty_val)
            steps += 1
        record = {
            "epoch": epoch,
            "loss": sums[0] / steps,
            "task_loss": sums[1] / steps,
            "penalty": sums[2] / steps,
            "ratios": [round(v, 6) for v in params.keep.values()],
        }
        history.append(record)
        log.info("epoch %d: loss %.4f task %.4f penalty %.4f r_avg %.3f",
                 epoch, record["loss"], record["task_loss"], record["penalty"],
                 float(np.mean(record["ratios"])))
    return params, history


def evaluate(dataset: Dataset, params: ModelParams, config: ModelConfig,
             split: str = "val", batch_size: int = 32,
             indices: list[int] | None = None,
             random_routing_seed: int | None = None) -> dict:
    """Accuracy metrics over a split using single-pass inference."""
    batcher = Batcher(dataset, config)
    if indices is None:
        indices = dataset.indices(split)
    if not indices:
        raise ValueError(f"no samples in split {split!r}")
    route_rng = (np.random.default_rng(random_routing_seed)
                 if random_routing_seed is not None else None)
    hits = np.zeros(3)
    correct = 0
    for start in range(0, len(indices), batch_size):
        chunk = indices[start:start + batch_size]
        logits = forward_infer(batcher.batch(chunk), params, config,
                               random_rng=route_rng)
        targets = batcher.targets(chunk)
        pred = predict(logits, config.task)
        if config.task == "beam":
            hits += ((pred.top1 == targets).sum(),
                     (pred.top3 == targets[:, None]).any(axis=1).sum(),
                     (pred.top5 == targets[:, None]).any(axis=1).sum())
        else:
            correct += int((pred == targets.astype(np.int64)).all(axis=1).sum())
    n = len(indices)
    if config.task == "beam":
        return {"task": "beam", "count": n, "top1": hits[0] / n,
                "top3": hits[1] / n, "top5": hits[2] / n}
    return {"task": "handover", "count": n, "accuracy": correct / n}


def benchmark(params: ModelParams, config: ModelConfig, batch: dict,
              repeats: int = 30, forced: tuple[float, ...] = (0.3, 0.5, 0.7, 1.0),
              ) -> list[dict]:
    """Median single-sample inference wall-clock at the trained ratios and at
    forced uniform ratios, with the accountant's FLOPs total for each."""
    n = count_tokens(config)
    rows = []
    settings = [("trained", None)] + [(f"{r:g}", [r] * config.blocks) for r in forced]
    for label, ratios in settings:
        effective = ratios if ratios is not None else params.keep.values()
        k_per_block = [inference_k(r, n) for r in effective]
        flops = count_flops(config, k_per_block).total_flops
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            forward_infer(batch, params, config, ratios=ratios)
            times.append(time.perf_counter() - t0)
        rows.append({"ratio": label, "mean_keep": float(np.mean(effective)),
                     "wall_clock_ms": float(np.median(times) * 1e3),
                     "flops": flops})
    return rows
