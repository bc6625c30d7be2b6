"""Adam with decoupled weight decay, per-group options, and clamping."""

from __future__ import annotations

import logging

import numpy as np

from .tensor import Tensor

log = logging.getLogger(__name__)


class AdamW:
    """Adam with decoupled weight decay.

    ``groups`` is a list of dicts: {"params": [Tensor], "lr": float,
    "weight_decay": float, "clamp": (lo, hi) or None}. A plain list of
    tensors is accepted as shorthand for a single default group. Steps with
    any non-finite gradient are skipped (and counted) rather than applied.

    ``step`` consumes gradients: they are cleared whether the update was
    applied or skipped, since backward passes accumulate into ``grad`` and a
    stale buffer would silently mix iterations.
    """

    def __init__(self, groups, lr: float = 1e-4, weight_decay: float = 0.01,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if groups and isinstance(groups[0], Tensor):
            groups = [{"params": list(groups)}]
        self.groups = []
        for g in groups:
            self.groups.append({
                "params": list(g["params"]),
                "lr": float(g.get("lr", lr)),
                "weight_decay": float(g.get("weight_decay", weight_decay)),
                "clamp": g.get("clamp"),
            })
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.skipped = 0
        self._m = {}
        self._v = {}
        for g in self.groups:
            for p in g["params"]:
                self._m[id(p)] = np.zeros_like(p.data)
                self._v[id(p)] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for g in self.groups:
            for p in g["params"]:
                p.grad = None

    def step(self) -> bool:
        """Apply one update; returns False (and changes nothing) when any
        gradient is non-finite."""
        for g in self.groups:
            for p in g["params"]:
                if p.grad is not None and not np.isfinite(p.grad).all():
                    self.skipped += 1
                    log.warning("skipping optimizer step %d: non-finite gradient%s",
                                self.t + 1, f" on {p.name}" if p.name else "")
                    self.zero_grad()
                    return False
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for g in self.groups:
            lr, wd, clamp = g["lr"], g["weight_decay"], g["clamp"]
            for p in g["params"]:
                if p.grad is None:
                    continue
                m = self._m[id(p)]
                v = self._v[id(p)]
                m *= self.beta1
                m += (1.0 - self.beta1) * p.grad
                v *= self.beta2
                v += (1.0 - self.beta2) * (p.grad * p.grad)
                update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
                if wd:
                    update = update + wd * p.data
                p.data -= lr * update
                if clamp is not None:
                    np.clip(p.data, clamp[0], clamp[1], out=p.data)
        self.zero_grad()
        return True
