"""Differentiable per-block keep ratios.

A block's integer width K is not differentiable, so training brackets each
ratio r between the two neighbouring widths, runs the block at both, and
blends the outputs with weights linear in r. The blend's derivative w.r.t. r
is then N * (out_up - out_down), the slope of the piecewise-linear
interpolation over the width grid. Inference rounds up to a single width.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .routing import BlockParams, RoutingDecision, routed_block_forward
from .tensor import Tensor

# n * r within this distance of an integer counts as sitting on the grid
GRID_EPS = 1e-9


@dataclass(frozen=True)
class Bracket:
    """Widths surrounding n * r plus their blend weights.

    ``degenerate`` means the target sits on the grid (or at the one-token
    floor) and a single pass at ``k_down`` suffices.
    """
    k_down: int
    k_up: int
    w_down: float
    w_up: float
    degenerate: bool


@dataclass
class KeepRatioParams:
    """One trainable shape-(1,) ratio per block plus the budget target."""
    ratios: list[Tensor]
    r_min: float
    gamma_prime: float = 1.0
    lam: float = 10.0

    def values(self) -> list[float]:
        return [float(r.data[0]) for r in self.ratios]


def init_keep_ratios(num_blocks: int, r_min: float, gamma_prime: float = 1.0,
                     lam: float = 10.0, r_init: float = 1.0) -> KeepRatioParams:
    if num_blocks < 1:
        raise ValueError(f"init_keep_ratios: need at least one block, got {num_blocks}")
    if not 0.0 < r_min <= 1.0:
        raise ValueError(f"init_keep_ratios: r_min {r_min} outside (0, 1]")
    if not r_min <= r_init <= 1.0:
        raise ValueError(f"init_keep_ratios: r_init {r_init} outside [{r_min}, 1]")
    ratios = [Tensor(np.array([r_init]), requires_grad=True) for _ in range(num_blocks)]
    return KeepRatioParams(ratios, r_min, gamma_prime, lam)


def mean_ratio(ratios: list[Tensor]) -> float:
    return float(np.mean([r.data[0] for r in ratios]))


def bracket_ratio(r: float, n: int) -> Bracket:
    """Integer widths surrounding ``n * r``.

    On-grid targets (and anything at most one token) collapse to a single
    pass at ``k_down``; otherwise the bracket is (floor, floor + 1) with
    weights w_up = n*r - k_down, w_down = k_up - n*r.
    """
    if n < 1:
        raise ValueError(f"bracket_ratio: need at least one token, got {n}")
    if not 0.0 < r <= 1.0:
        raise ValueError(f"bracket_ratio: ratio {r} outside (0, 1]")
    t = n * r
    nearest = round(t)
    if abs(t - nearest) < GRID_EPS:
        k = max(1, min(int(nearest), n))
        return Bracket(k, min(k + 1, n), 1.0, 0.0, True)
    if t <= 1.0:  # below one token: pinned to the CLS floor
        return Bracket(1, min(2, n), 1.0, 0.0, True)
    k_down = int(math.floor(t))
    k_up = k_down + 1
    return Bracket(k_down, k_up, float(k_up) - t, t - float(k_down), False)


def interp_weights(r: Tensor, bracket: Bracket, n: int) -> tuple[Tensor, Tensor]:
    """Blend weights (w_down, w_up) as live graph expressions of ``r``."""
    if bracket.degenerate:
        raise ValueError("interp_weights: degenerate bracket has a single pass")
    t = T.scalar_mul(r, float(n))
    w_up = T.sub(t, Tensor(np.array([float(bracket.k_down)])))
    w_down = T.sub(Tensor(np.array([float(bracket.k_up)])), t)
    return w_down, w_up


def dual_pass_combine(x: Tensor, decision: RoutingDecision, bracket: Bracket, r: Tensor,
                      params: BlockParams, config: ModelConfig) -> Tensor:
    """Run one block under a bracketed width.

    Non-degenerate brackets run the block at both widths over the shared
    score ranking and blend the outputs; the blend weights stay on the graph
    so the ratio receives gradient N * (out_up - out_down). Degenerate
    brackets run once and contribute no local ratio gradient.
    """
    n = x.shape[1]
    if decision.order.shape[1] != n:
        raise ValueError(f"dual_pass_combine: ranking covers {decision.order.shape[1]} "
                         f"tokens, input has {n}")
    if bracket.k_up > n or bracket.k_down < 1:
        raise ValueError(f"dual_pass_combine: bracket {bracket.k_down}..{bracket.k_up} "
                         f"invalid for {n} tokens")
    if bracket.degenerate:
        return routed_block_forward(x, decision, bracket.k_down, params, config)
    out_down = routed_block_forward(x, decision, bracket.k_down, params, config)
    out_up = routed_block_forward(x, decision, bracket.k_up, params, config)
    w_down, w_up = interp_weights(r, bracket, n)
    return T.add(T.mul(w_down, out_down), T.mul(w_up, out_up))


def budget_penalty(ratios: list[Tensor], gamma_prime: float, lam: float = 10.0) -> Tensor:
    """lam * (mean(r) - gamma')^2 as a scalar graph node."""
    if not ratios:
        raise ValueError("budget_penalty: no ratios")
    if lam < 0.0:
        raise ValueError(f"budget_penalty: negative weight {lam}")
    acc = ratios[0]
    for r in ratios[1:]:
        acc = T.add(acc, r)
    dev = T.sub(T.scalar_mul(acc, 1.0 / len(ratios)),
                Tensor(np.array([float(gamma_prime)])))
    return T.sum(T.scalar_mul(T.mul(dev, dev), lam))


def target_ratio_from_flops(gamma: float, flops_max: float, r_min: float) -> float:
    """Uniform ratio whose roughly quadratic cost meets a FLOPs budget.

    Attention dominates at scale and grows with K^2, so the budget fraction
    maps to a ratio through a square root, clamped into [r_min, 1].
    """
    if gamma <= 0.0 or flops_max <= 0.0:
        raise ValueError("target_ratio_from_flops: budget and ceiling must be positive")
    if not 0.0 < r_min <= 1.0:
        raise ValueError(f"target_ratio_from_flops: r_min {r_min} outside (0, 1]")
    return min(1.0, max(r_min, math.sqrt(gamma / flops_max)))


def inference_k(r: float, n: int) -> int:
    """Single inference width: ceil(n * r) with a guard against float dust
    pushing an on-grid target up a notch."""
    if n < 1:
        raise ValueError(f"inference_k: need at least one token, got {n}")
    if not 0.0 < r <= 1.0:
        raise ValueError(f"inference_k: ratio {r} outside (0, 1]")
    return max(1, min(n, int(math.ceil(n * r - GRID_EPS))))
