"""Per-block token scoring and Top-K gated-residual routing.

Each block scores all tokens with a tiny two-layer perceptron, keeps the K
best (CLS always among them), runs the encoder block on those rows only, and
writes back ``x + score * block_delta``; every other row bypasses the block
untouched. ``block_delta`` is the block's residual contribution, so a gate of
1 reproduces a standard pre-norm encoder block and a gate of 0 is a no-op.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .tensor import Tensor


@dataclass
class RouterParams:
    """d -> d_router -> 1 scorer."""
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class BlockParams:
    """Pre-norm encoder block: LN, separate Q/K/V/O projections, LN, MLP."""
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w_in: Tensor
    b_in: Tensor
    w_out: Tensor
    b_out: Tensor
    router: RouterParams


@dataclass
class RoutingDecision:
    """Scores plus a full preference order over token indices.

    ``order[:, 0]`` is always the CLS index, the rest sort by descending
    score with ties to the lower index; the top-K selection for any K is the
    first K columns, so a K and K+1 selection share their first K entries.
    """
    scores: Tensor  # (B, N)
    order: np.ndarray  # (B, N) int

    def selected(self, k: int) -> np.ndarray:
        return self.order[:, :k]

    def bypassed(self, k: int) -> np.ndarray:
        return self.order[:, k:]


def _trunc(rng, shape, std=0.02):
    return Tensor(np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std),
                  requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape):
    return Tensor(np.ones(shape), requires_grad=True)


def init_block_params(config: ModelConfig, rng: np.random.Generator) -> BlockParams:
    d, dff, dr = config.d, config.d_ff, config.d_router
    return BlockParams(
        ln1_g=_ones(d), ln1_b=_zeros(d),
        wq=_trunc(rng, (d, d)), bq=_zeros(d),
        wk=_trunc(rng, (d, d)), bk=_zeros(d),
        wv=_trunc(rng, (d, d)), bv=_zeros(d),
        wo=_trunc(rng, (d, d)), bo=_zeros(d),
        ln2_g=_ones(d), ln2_b=_zeros(d),
        w_in=_trunc(rng, (d, dff)), b_in=_zeros(dff),
        w_out=_trunc(rng, (dff, d)), b_out=_zeros(d),
        # output bias starts at one so a fresh model gates like a plain
        # pre-norm stack instead of suppressing every block's residual
        router=RouterParams(_trunc(rng, (d, dr)), _zeros(dr), _trunc(rng, (dr, 1)),
                            _ones(1)),
    )


def score_tokens(x: Tensor, params: RouterParams) -> Tensor:
    """(B, N, d) tokens -> (B, N) importance scores, differentiable in both
    the tokens and the router weights."""
    if len(x.shape) != 3:
        raise ValueError(f"score_tokens: expected (B, N, d) tokens, got {x.shape}")
    h = T.linear(T.gelu(T.linear(x, params.w1, params.b1)), params.w2, params.b2)
    b, n, _ = x.shape
    return T.reshape(h, (b, n))


def select_topk(scores: Tensor | np.ndarray, k: int, cls_index: int = 0) -> RoutingDecision:
    """Rank tokens by score (ties to the lower index) with CLS pinned first.

    Selection is a discrete step: the returned order is plain integer data
    and carries no gradient.
    """
    score_t = scores if isinstance(scores, Tensor) else Tensor(np.asarray(scores, dtype=np.float64))
    data = score_t.data
    if data.ndim == 1:
        data = data[None, :]
        score_t = T.reshape(score_t, (1, data.shape[1]))
    n = data.shape[1]
    if not 1 <= k <= n:
        raise ValueError(f"select_topk: k={k} out of range for {n} tokens")
    if not 0 <= cls_index < n:
        raise ValueError(f"select_topk: cls index {cls_index} out of range")
    key = -data.copy()
    key[:, cls_index] = -np.inf  # pin CLS to the front of the order
    order = np.argsort(key, axis=1, kind="stable")
    return RoutingDecision(score_t, order)


def block_delta(x: Tensor, p: BlockParams, heads: int) -> Tensor:
    """Residual contribution of a pre-norm encoder block on (B, K, d) rows:
    attention delta plus MLP delta evaluated after the attention residual."""
    b, k, d = x.shape
    dh = d // heads
    h1 = T.layernorm(x, p.ln1_g, p.ln1_b)

    def split(t):  # (B, K, d) -> (B, heads, K, dh)
        return T.transpose(T.reshape(t, (b, k, heads, dh)), (0, 2, 1, 3))

    q = split(T.linear(h1, p.wq, p.bq))
    kk = split(T.linear(h1, p.wk, p.bk))
    v = split(T.linear(h1, p.wv, p.bv))
    att = T.softmax(T.scalar_mul(T.matmul(q, T.transpose(kk, (0, 1, 3, 2))),
                                 1.0 / math.sqrt(dh)))
    ctx = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (b, k, d))
    attn_delta = T.linear(ctx, p.wo, p.bo)
    mid = T.add(x, attn_delta)
    mlp_delta = T.linear(T.gelu(T.linear(T.layernorm(mid, p.ln2_g, p.ln2_b),
                                         p.w_in, p.b_in)), p.w_out, p.b_out)
    return T.add(attn_delta, mlp_delta)


def routed_block_forward(x: Tensor, decision: RoutingDecision, k: int, params: BlockParams,
                         config: ModelConfig) -> Tensor:
    """Process the top-k rows of (B, N, d) through the block, gated by their
    scores; bypassed rows pass through bit-for-bit."""
    idx = decision.selected(k)
    x_sel = T.gather_rows(x, idx, unique=True)
    delta = block_delta(x_sel, params, config.heads)
    gates = T.gather_rows(T.reshape(decision.scores, (*decision.scores.shape, 1)),
                          idx, unique=True)
    if config.gate == "sigmoid":
        gates = T.sigmoid(gates)
    return T.scatter_rows_add(x, idx, T.mul(gates, delta), unique=True)
