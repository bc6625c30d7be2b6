"""Dense float64 tensors with taped reverse-mode automatic differentiation.

Forward math runs on NumPy. Every primitive validates shapes, rejects
non-finite inputs, and (when a Tape is active and some input participates in
differentiation) appends a node describing how to push gradients back to its
inputs. ``backward`` replays the tape in reverse, accumulating gradients with
``+=`` semantics across fan-out.
"""

from __future__ import annotations

import math

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715
_LOG_FLOOR = 1e-30
LAYERNORM_EPS = 1e-5


class Tensor:
    """A dense float64 array plus an optional gradient buffer.

    ``requires_grad`` marks leaves whose gradient should be produced by
    ``backward``; outputs of primitives inherit the flag from their inputs.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _fail(
            "item", f"tensor of shape {self.data.shape} is not a scalar")

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"

    # Small operator sugar; the module-level functions are the real API.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __neg__(self):
        return scalar_mul(self, -1.0)


class Tape:
    """Execution-ordered record of primitive applications (define-by-run).

    Nodes are (output, parents, backward_fn); inputs always precede their
    consumers because nodes are appended as primitives execute. A fresh tape
    is opened per forward pass; inference simply runs without one.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _TAPES.pop()
        return False


_TAPES: list[Tape] = []


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _fail(op: str, msg: str):
    raise ValueError(f"{op}: {msg}")


def _finite(op: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.isfinite(a).all():
            _fail(op, "non-finite input")


def _result(op: str, data: np.ndarray, parents: tuple[Tensor, ...], bwd) -> Tensor:
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if _TAPES and out.requires_grad:
        _TAPES[-1].nodes.append((out, parents, bwd))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _finite("add", a.data, b.data)
    try:
        data = a.data + b.data
    except ValueError:
        _fail("add", f"shapes {a.shape} and {b.shape} do not broadcast")

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _finite("sub", a.data, b.data)
    try:
        data = a.data - b.data
    except ValueError:
        _fail("sub", f"shapes {a.shape} and {b.shape} do not broadcast")

    def bwd(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _result("sub", data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _finite("mul", a.data, b.data)
    try:
        data = a.data * b.data
    except ValueError:
        _fail("mul", f"shapes {a.shape} and {b.shape} do not broadcast")

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result("mul", data, (a, b), bwd)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    if not math.isfinite(c):
        _fail("scalar_mul", "non-finite scalar")
    _finite("scalar_mul", a.data)

    def bwd(g):
        return (g * c,)

    return _result("scalar_mul", a.data * c, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra and shape plumbing


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _finite("matmul", a.data, b.data)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0:
        _fail("matmul", f"operands must be at least 1-d, got {a.shape} and {b.shape}")
    try:
        data = np.matmul(ad, bd)
    except ValueError:
        _fail("matmul", f"shapes {a.shape} and {b.shape} are not aligned")

    def bwd(g):
        if bd.ndim == 1:
            ga = g[..., None] * bd
            gb = (g[..., None] * ad).sum(axis=tuple(range(ad.ndim - 1)))
            return _unbroadcast(ga, a.shape), gb
        if ad.ndim == 1:
            ga = (bd * g[..., None, :]).sum(axis=-1)
            ga = ga.sum(axis=tuple(range(ga.ndim - 1)))
            gb = ad[:, None] * g[..., None, :]
            return ga, _unbroadcast(gb, b.shape)
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result("matmul", data, (a, b), bwd)


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    a = _as_tensor(a)
    _finite("transpose", a.data)
    data = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))

    def bwd(g):
        return (np.transpose(g, inv),)

    return _result("transpose", data, (a,), bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    _finite("reshape", a.data)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        _fail("reshape", f"cannot reshape {a.shape} to {shape}")
    old = a.shape

    def bwd(g):
        return (g.reshape(old),)

    return _result("reshape", data, (a,), bwd)


def concat(*tensors: Tensor, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        _fail("concat", "needs at least one input")
    _finite("concat", *[t.data for t in ts])
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        _fail("concat", f"shapes {[t.shape for t in ts]} do not concatenate on axis {axis}")
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result("concat", data, tuple(ts), bwd)


def gather_rows(x: Tensor, idx: np.ndarray, unique: bool = False) -> Tensor:
    """Select rows along the second-to-last axis.

    ``x`` is (N, D) with ``idx`` (K,), or (B, N, D) with ``idx`` (B, K).
    Differentiable w.r.t. the gathered values only, never the indices.
    ``unique=True`` promises no duplicate indices per batch row, enabling a
    faster scatter in the backward pass.
    """
    x = _as_tensor(x)
    _finite("gather_rows", x.data)
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        _fail("gather_rows", f"index dtype {idx.dtype} is not integral")
    xd = x.data
    if xd.ndim == 2 and idx.ndim == 1:
        if idx.size and (idx.min() < 0 or idx.max() >= xd.shape[0]):
            _fail("gather_rows", f"index out of range for {x.shape}")
        data = xd[idx]

        def bwd(g):
            gx = np.zeros_like(xd)
            if unique:
                gx[idx] += g
            else:
                np.add.at(gx, idx, g)
            return (gx,)

    elif xd.ndim == 3 and idx.ndim == 2 and idx.shape[0] == xd.shape[0]:
        if idx.size and (idx.min() < 0 or idx.max() >= xd.shape[1]):
            _fail("gather_rows", f"index out of range for {x.shape}")
        rows = np.arange(xd.shape[0])[:, None]
        data = xd[rows, idx]

        def bwd(g):
            gx = np.zeros_like(xd)
            if unique:
                gx[rows, idx] += g
            else:
                np.add.at(gx, (rows, idx), g)
            return (gx,)

    else:
        _fail("gather_rows", f"unsupported shapes x={x.shape}, idx={idx.shape}")

    return _result("gather_rows", data, (x,), bwd)


def scatter_rows_add(base: Tensor, idx: np.ndarray, rows: Tensor, unique: bool = False) -> Tensor:
    """Copy ``base`` and add ``rows`` at the given row indices.

    Shapes mirror ``gather_rows``; rows not named in ``idx`` are returned
    bit-for-bit unchanged. Gradients flow to ``base`` (identity) and to
    ``rows`` (a gather of the upstream gradient), never to ``idx``.
    """
    base, rows = _as_tensor(base), _as_tensor(rows)
    _finite("scatter_rows_add", base.data, rows.data)
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        _fail("scatter_rows_add", f"index dtype {idx.dtype} is not integral")
    bd, rd = base.data, rows.data
    if bd.ndim == 2 and idx.ndim == 1:
        if rd.shape != (idx.shape[0], bd.shape[1]):
            _fail("scatter_rows_add",
                  f"rows shape {rows.shape} does not match idx {idx.shape} and base {base.shape}")
        if idx.size and (idx.min() < 0 or idx.max() >= bd.shape[0]):
            _fail("scatter_rows_add", f"index out of range for {base.shape}")
        data = bd.copy()
        if unique:
            data[idx] += rd
        else:
            np.add.at(data, idx, rd)

        def bwd(g):
            return g, g[idx]

    elif bd.ndim == 3 and idx.ndim == 2 and idx.shape[0] == bd.shape[0]:
        if rd.shape != (idx.shape[0], idx.shape[1], bd.shape[2]):
            _fail("scatter_rows_add",
                  f"rows shape {rows.shape} does not match idx {idx.shape} and base {base.shape}")
        if idx.size and (idx.min() < 0 or idx.max() >= bd.shape[1]):
            _fail("scatter_rows_add", f"index out of range for {base.shape}")
        rows_ax = np.arange(bd.shape[0])[:, None]
        data = bd.copy()
        if unique:
            data[rows_ax, idx] += rd
        else:
            np.add.at(data, (rows_ax, idx), rd)

        def bwd(g):
            return g, g[rows_ax, idx]

    else:
        _fail("scatter_rows_add", f"unsupported shapes base={base.shape}, idx={idx.shape}")

    return _result("scatter_rows_add", data, (base, rows), bwd)


# ---------------------------------------------------------------------------
# convolution and pooling


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c, _, _ = xp.shape
    sb, sc, sh, sw = xp.strides
    shape = (b, c, ho, wo, kh, kw)
    strides = (sb, sc, sh * stride, sw * stride, sh, sw)
    return np.lib.stride_tricks.as_strided(xp, shape=shape, strides=strides)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d convolution, NCHW input, OIHW weights."""
    x, w = _as_tensor(x), _as_tensor(w)
    _finite("conv2d", x.data, w.data)
    if b is not None:
        b = _as_tensor(b)
        _finite("conv2d", b.data)
    if x.data.ndim != 4 or w.data.ndim != 4:
        _fail("conv2d", f"expected 4-d input and weight, got {x.shape} and {w.shape}")
    bs, cin, h, wdt = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        _fail("conv2d", f"input channels {cin} do not match weight channels {cin_w}")
    if b is not None and b.data.shape != (cout,):
        _fail("conv2d", f"bias shape {b.shape} does not match {cout} output channels")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wdt + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        _fail("conv2d", f"kernel {kh}x{kw} does not fit input {h}x{wdt} with pad {pad}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    data = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3]))  # (B,Ho,Wo,Cout)
    data = np.ascontiguousarray(data.transpose(0, 3, 1, 2))
    if b is not None:
        data += b.data[:, None, None]

    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))  # (Cout,Cin,kh,kw)
        t = np.tensordot(g, w.data, axes=([1], [0]))  # (B,Ho,Wo,Cin,kh,kw)
        t = t.transpose(0, 3, 1, 2, 4, 5)  # (B,Cin,Ho,Wo,kh,kw)
        gxp = np.zeros_like(xp)
        for ki in range(kh):
            for kj in range(kw):
                gxp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += t[..., ki, kj]
        gx = gxp[:, :, pad:pad + h, pad:pad + wdt] if pad else gxp
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _result("conv2d", data, parents, bwd)


def max_pool(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; spatial dims must divide by ``size``.

    Gradient at a tie is split evenly across the tied entries.
    """
    x = _as_tensor(x)
    _finite("max_pool", x.data)
    if x.data.ndim != 4:
        _fail("max_pool", f"expected 4-d input, got {x.shape}")
    bs, c, h, w = x.data.shape
    if h % size or w % size:
        _fail("max_pool", f"input {h}x{w} not divisible by pool size {size}")
    v = x.data.reshape(bs, c, h // size, size, w // size, size)
    data = v.max(axis=(3, 5))

    def bwd(g):
        mask = v == data[:, :, :, None, :, None]
        count = mask.sum(axis=(3, 5), keepdims=True)
        gx = mask * (g[:, :, :, None, :, None] / count)
        return (gx.reshape(bs, c, h, w),)

    return _result("max_pool", data, (x,), bwd)


# ---------------------------------------------------------------------------
# layers and activations


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``w`` shaped (in, out) and leading batch axes on x."""
    x, w = _as_tensor(x), _as_tensor(w)
    _finite("linear", x.data, w.data)
    if w.data.ndim != 2:
        _fail("linear", f"weight must be 2-d, got {w.shape}")
    if x.data.ndim < 1 or x.data.shape[-1] != w.data.shape[0]:
        _fail("linear", f"input {x.shape} does not match weight {w.shape}")
    if b is not None:
        b = _as_tensor(b)
        _finite("linear", b.data)
        if b.data.shape != (w.data.shape[1],):
            _fail("linear", f"bias shape {b.shape} does not match weight {w.shape}")
    data = x.data @ w.data
    if b is not None:
        data = data + b.data
    parents = (x, w) if b is None else (x, w, b)
    in_dim, out_dim = w.data.shape

    def bwd(g):
        gx = g @ w.data.T
        gw = x.data.reshape(-1, in_dim).T @ g.reshape(-1, out_dim)
        if b is None:
            return gx, gw
        return gx, gw, g.reshape(-1, out_dim).sum(axis=0)

    return _result("linear", data, parents, bwd)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Layer normalization over the last axis."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    _finite("layernorm", x.data, gamma.data, beta.data)
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        _fail("layernorm", f"scale/offset shapes {gamma.shape}/{beta.shape} do not match last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data
    lead = tuple(range(x.data.ndim - 1))

    def bwd(g):
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (dxhat - m1 - xhat * m2)
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result("layernorm", data, (x, gamma, beta), bwd)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis with max-subtraction."""
    x = _as_tensor(x)
    _finite("softmax", x.data)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        return (data * (g - dot),)

    return _result("softmax", data, (x,), bwd)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = _as_tensor(x)
    _finite("gelu", x.data)
    xd = x.data
    u = _GELU_C * (xd + _GELU_A * xd ** 3)
    t = np.tanh(u)
    data = 0.5 * xd * (1.0 + t)

    def bwd(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return _result("gelu", data, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    _finite("sigmoid", x.data)
    xd = x.data
    data = np.where(xd >= 0, 1.0 / (1.0 + np.exp(-np.abs(xd))),
                    np.exp(-np.abs(xd)) / (1.0 + np.exp(-np.abs(xd))))

    def bwd(g):
        return (g * data * (1.0 - data),)

    return _result("sigmoid", data, (x,), bwd)


def log(x: Tensor) -> Tensor:
    """Natural log with inputs floored at 1e-30 so finite inputs stay finite."""
    x = _as_tensor(x)
    _finite("log", x.data)
    clipped = np.maximum(x.data, _LOG_FLOOR)
    data = np.log(clipped)

    def bwd(g):
        return (g / clipped,)

    return _result("log", data, (x,), bwd)


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def mean(x: Tensor, axis=None) -> Tensor:
    x = _as_tensor(x)
    _finite("mean", x.data)
    ax = _norm_axis(axis, x.data.ndim)
    data = x.data.mean(axis=ax)
    shape = x.shape
    n = x.data.size if ax is None else int(np.prod([shape[a] for a in ax]))

    def bwd(g):
        if ax is None:
            return (np.full(shape, 1.0, dtype=np.float64) * (g / n),)
        gk = np.expand_dims(g, ax)
        return (np.broadcast_to(gk, shape) / n,)

    return _result("mean", data, (x,), bwd)


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - numpy-style name
    x = _as_tensor(x)
    _finite("sum", x.data)
    ax = _norm_axis(axis, x.data.ndim)
    data = x.data.sum(axis=ax)
    shape = x.shape

    def bwd(g):
        if ax is None:
            return (np.full(shape, 1.0, dtype=np.float64) * g,)
        gk = np.expand_dims(g, ax)
        return (np.broadcast_to(gk, shape).copy(),)

    return _result("sum", data, (x,), bwd)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup into an embedding table; duplicate ids accumulate gradient."""
    table = _as_tensor(table)
    _finite("embedding_lookup", table.data)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        _fail("embedding_lookup", f"id dtype {ids.dtype} is not integral")
    if table.data.ndim != 2:
        _fail("embedding_lookup", f"table must be 2-d, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        _fail("embedding_lookup", f"id out of range for table {table.shape}")
    data = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _result("embedding_lookup", data, (table,), bwd)


# ---------------------------------------------------------------------------
# losses


def cross_entropy_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy of (B, C) logits against integer class targets."""
    logits = _as_tensor(logits)
    _finite("cross_entropy_with_logits", logits.data)
    targets = np.asarray(targets)
    if logits.data.ndim != 2:
        _fail("cross_entropy_with_logits", f"logits must be 2-d, got {logits.shape}")
    bs, c = logits.data.shape
    if targets.shape != (bs,):
        _fail("cross_entropy_with_logits",
              f"targets shape {targets.shape} does not match batch {bs}")
    if not np.issubdtype(targets.dtype, np.integer):
        _fail("cross_entropy_with_logits", f"target dtype {targets.dtype} is not integral")
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        _fail("cross_entropy_with_logits", f"class index out of range for {c} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(bs)
    data = np.float64((lse - z[rows, targets]).mean())

    def bwd(g):
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        p[rows, targets] -= 1.0
        return (p * (g / bs),)

    return _result("cross_entropy_with_logits", data, (logits,), bwd)


def binary_cross_entropy_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean element-wise binary cross-entropy against {0,1} targets."""
    logits = _as_tensor(logits)
    _finite("binary_cross_entropy_with_logits", logits.data)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.data.shape:
        _fail("binary_cross_entropy_with_logits",
              f"targets shape {targets.shape} does not match logits {logits.shape}")
    z = logits.data
    data = np.float64((np.maximum(z, 0.0) - z * targets + np.log1p(np.exp(-np.abs(z)))).mean())
    n = z.size

    def bwd(g):
        s = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                     np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
        return ((s - targets) * (g / n),)

    return _result("binary_cross_entropy_with_logits", data, (logits,), bwd)


def mse(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _finite("mse", a.data, b.data)
    if a.data.shape != b.data.shape:
        _fail("mse", f"shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    data = np.float64((diff * diff).mean())
    n = diff.size

    def bwd(g):
        gd = diff * (2.0 * g / n)
        return gd, -gd

    return _result("mse", data, (a, b), bwd)


# ---------------------------------------------------------------------------
# dispatch table, backward, gradient checker

PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scalar-mul": scalar_mul,
    "matmul": matmul,
    "transpose": transpose,
    "reshape": reshape,
    "concat": concat,
    "gather-rows": gather_rows,
    "scatter-rows-add": scatter_rows_add,
    "conv2d": conv2d,
    "max-pool": max_pool,
    "linear": linear,
    "layernorm": layernorm,
    "softmax": softmax,
    "gelu": gelu,
    "sigmoid": sigmoid,
    "log": log,
    "mean": mean,
    "sum": sum,
    "embedding-lookup": embedding_lookup,
    "cross-entropy-with-logits": cross_entropy_with_logits,
    "binary-cross-entropy-with-logits": binary_cross_entropy_with_logits,
    "mse": mse,
}


def apply(op: str, *inputs, **attrs) -> Tensor:
    """Name-based primitive dispatch; handy for looping over the op set."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **attrs)


def backward(loss: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    """Reverse sweep: populate ``grad`` on every requires_grad leaf reachable
    from ``loss`` and return a leaf -> gradient map."""
    if loss.data.size != 1:
        _fail("backward", f"loss must be scalar, got shape {loss.shape}")
    produced = {id(out) for out, _, _ in tape.nodes}
    if id(loss) not in produced:
        _fail("backward", "loss was not recorded on this tape (detached graph)")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for out, parents, bwd in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        holders.pop(id(out), None)
        if g is None:
            continue
        for p, pg in zip(parents, bwd(g)):
            if pg is None or not p.requires_grad:
                continue
            pid = id(p)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
                holders[pid] = p
    leaf_grads: dict[Tensor, np.ndarray] = {}
    for pid, g in grads.items():
        t = holders[pid]
        t.grad = g if t.grad is None else t.grad + g
        leaf_grads[t] = g
    return leaf_grads


def grad_check(f, inputs, step: float = 1e-5, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Compare taped gradients of scalar ``f(*inputs)`` against central
    finite differences.

    Returns the max over checked coordinates of
    |analytic - numeric| / max(1e-8, |numeric|). ``max_coords`` caps the
    number of coordinates probed per input (random subset) for large tensors.
    """
    with Tape() as tape:
        loss = f(*inputs)
    if not np.isfinite(loss.data).all():
        _fail("grad_check", "non-finite loss")
    grads = backward(loss, tape)
    worst = 0.0
    for t in inputs:
        if not (isinstance(t, Tensor) and t.requires_grad):
            continue
        analytic = grads.get(t)
        if analytic is None:
            analytic = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        aflat = analytic.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, size=max_coords,
                                                              replace=False)
        for i in coords:
            saved = flat[i]
            flat[i] = saved + step
            fp = float(f(*inputs).data)
            flat[i] = saved - step
            fm = float(f(*inputs).data)
            flat[i] = saved
            if not (math.isfinite(fp) and math.isfinite(fm)):
                _fail("grad_check", "non-finite evaluation during finite differences")
            numeric = (fp - fm) / (2.0 * step)
            err = abs(aflat[i] - numeric) / max(1e-8, abs(numeric))
            worst = max(worst, err)
    return worst
