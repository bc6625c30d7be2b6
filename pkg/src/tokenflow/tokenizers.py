"""Modality tokenizers and token sequence assembly.

Images and bird's-eye-view point rasters go through a small conv stack down
to a grid of tokens; radar detections are ranked, padded, and projected row
by row; GPS and RSSI map to one token each. Assembly prepends a learned CLS
token and adds position, time, and modality embeddings to everything else.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import KIND_IDS, KINDS, ModelConfig
from .tensor import Tensor


@dataclass
class ModalityFrame:
    """One sensor reading: image HxW, pointcloud (P,4) rows (x,y,z,feature),
    radar (n,4) rows (radial velocity, azimuth, altitude, return), gps (2,),
    rssi (1,)."""
    kind: str
    payload: np.ndarray
    frame_index: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown modality kind {self.kind!r}")
        self.payload = np.asarray(self.payload, dtype=np.float64)


@dataclass
class SequenceLayout:
    """Per-token provenance; row 0 is always the CLS token."""
    kind: np.ndarray
    frame: np.ndarray
    within: np.ndarray
    is_cls: np.ndarray

    def __len__(self) -> int:
        return len(self.kind)


@dataclass
class TokenSequence:
    tokens: Tensor  # (N, d) or batched (B, N, d)
    layout: SequenceLayout


@dataclass
class ConvParams:
    w: Tensor
    b: Tensor


@dataclass
class ResBlockParams:
    conv1: ConvParams
    conv2: ConvParams
    skip: ConvParams


@dataclass
class ConvStackParams:
    stem: ConvParams
    res1: ResBlockParams
    res2: ResBlockParams
    proj: ConvParams


@dataclass
class MlpParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class TokenizerParams:
    image_stack: ConvStackParams | None
    pc_stack: ConvStackParams | None
    radar_mlp: MlpParams | None
    gps_mlp: MlpParams | None
    rssi_mlp: MlpParams | None
    pos_image: Tensor | None
    pos_pc: Tensor | None
    pos_radar: Tensor | None
    pos_gps: Tensor | None
    pos_rssi: Tensor | None
    time_embed: Tensor
    modality_embed: Tensor
    cls: Tensor


def conv_plan(hw: int, c_in: int, c0: int, d: int) -> list[dict]:
    """Layer shapes of the conv stack; shared with the FLOPs accountant.

    Stride-2 stem, 2x2 max pool, two stride-2 residual blocks, then a 1x1
    projection to the embedding dim. Total downsample 16.
    """
    c1 = 2 * c0
    h = hw // 2  # stem
    hp = h // 2  # pool
    h1 = hp // 2  # res1
    h2 = h1 // 2  # res2
    return [
        {"name": "stem", "c_in": c_in, "c_out": c0, "k": 3, "stride": 2, "h_in": hw, "h_out": h},
        {"name": "res1.conv1", "c_in": c0, "c_out": c1, "k": 3, "stride": 2, "h_in": hp, "h_out": h1},
        {"name": "res1.conv2", "c_in": c1, "c_out": c1, "k": 3, "stride": 1, "h_in": h1, "h_out": h1},
        {"name": "res1.skip", "c_in": c0, "c_out": c1, "k": 1, "stride": 2, "h_in": hp, "h_out": h1},
        {"name": "res2.conv1", "c_in": c1, "c_out": c1, "k": 3, "stride": 2, "h_in": h1, "h_out": h2},
        {"name": "res2.conv2", "c_in": c1, "c_out": c1, "k": 3, "stride": 1, "h_in": h2, "h_out": h2},
        {"name": "res2.skip", "c_in": c1, "c_out": c1, "k": 1, "stride": 2, "h_in": h1, "h_out": h2},
        {"name": "proj", "c_in": c1, "c_out": d, "k": 1, "stride": 1, "h_in": h2, "h_out": h2},
    ]


def _he(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)


def _table(rng: np.random.Generator, shape: tuple[int, ...], std: float = 0.02) -> Tensor:
    return Tensor(np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std),
                  requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _conv(rng, c_in, c_out, k) -> ConvParams:
    return ConvParams(_he(rng, (c_out, c_in, k, k), fan_in=c_in * k * k), _zeros(c_out))


def _stack(rng, c_in, c0, d) -> ConvStackParams:
    c1 = 2 * c0
    return ConvStackParams(
        stem=_conv(rng, c_in, c0, 3),
        res1=ResBlockParams(_conv(rng, c0, c1, 3), _conv(rng, c1, c1, 3), _conv(rng, c0, c1, 1)),
        res2=ResBlockParams(_conv(rng, c1, c1, 3), _conv(rng, c1, c1, 3), _conv(rng, c1, c1, 1)),
        proj=_conv(rng, c1, d, 1),
    )


def _mlp(rng, d_in, hidden, d_out) -> MlpParams:
    return MlpParams(_he(rng, (d_in, hidden), d_in), _zeros(hidden),
                     _he(rng, (hidden, d_out), hidden), _zeros(d_out))


def init_tokenizer_params(config: ModelConfig, rng: np.random.Generator) -> TokenizerParams:
    mods = config.modalities
    g2 = config.grid ** 2
    gb2 = config.bev_grid ** 2
    pos_image = _table(rng, (g2, config.d)) if "image" in mods else None
    if "pointcloud" in mods:
        if config.share_grid_pos and pos_image is not None and g2 == gb2:
            pos_pc = pos_image
        else:
            pos_pc = _table(rng, (gb2, config.d))
    else:
        pos_pc = None
    return TokenizerParams(
        image_stack=_stack(rng, 1, config.conv_width, config.d) if "image" in mods else None,
        pc_stack=_stack(rng, 1, config.conv_width, config.d) if "pointcloud" in mods else None,
        radar_mlp=_mlp(rng, 4, config.scalar_hidden, config.d) if "radar" in mods else None,
        gps_mlp=_mlp(rng, 2, config.scalar_hidden, config.d) if "gps" in mods else None,
        rssi_mlp=_mlp(rng, 1, config.scalar_hidden, config.d) if "rssi" in mods else None,
        pos_image=pos_image,
        pos_pc=pos_pc,
        pos_radar=_table(rng, (config.n_rad, config.d)) if "radar" in mods else None,
        pos_gps=_table(rng, (1, config.d)) if "gps" in mods else None,
        pos_rssi=_table(rng, (1, config.d)) if "rssi" in mods else None,
        time_embed=_table(rng, (config.tau, config.d)),
        modality_embed=_table(rng, (len(KINDS), config.d)),
        cls=_table(rng, (1, config.d)),
    )


# ---------------------------------------------------------------------------
# token counting


def tokens_per_frame(config: ModelConfig) -> dict[str, int]:
    counts = {"image": config.grid ** 2, "pointcloud": config.bev_grid ** 2,
              "radar": config.n_rad, "gps": 1, "rssi": 1}
    return {k: counts[k] for k in KINDS if k in config.modalities}


def count_tokens(config: ModelConfig) -> int:
    """Total sequence length including the CLS token."""
    return 1 + config.tau * int(np.sum(list(tokens_per_frame(config).values())))


# ---------------------------------------------------------------------------
# per-modality tokenizers


def _conv_stack_forward(x: Tensor, p: ConvStackParams, d: int) -> Tensor:
    """(B, 1, H, W) -> (B, grid**2, d)."""
    h = T.gelu(T.conv2d(x, p.stem.w, p.stem.b, stride=2, pad=1))
    h = T.max_pool(h, 2)
    for res in (p.res1, p.res2):
        main = T.conv2d(T.gelu(T.conv2d(h, res.conv1.w, res.conv1.b, stride=2, pad=1)),
                        res.conv2.w, res.conv2.b, stride=1, pad=1)
        h = T.gelu(T.add(main, T.conv2d(h, res.skip.w, res.skip.b, stride=2, pad=0)))
    h = T.conv2d(h, p.proj.w, p.proj.b)
    b, _, g, _ = h.shape
    return T.transpose(T.reshape(h, (b, d, g * g)), (0, 2, 1))


def _mlp_forward(x: Tensor, p: MlpParams) -> Tensor:
    return T.linear(T.gelu(T.linear(x, p.w1, p.b1)), p.w2, p.b2)


def tokenize_image(frame: ModalityFrame, params: TokenizerParams, config: ModelConfig) -> Tensor:
    """One image frame -> (grid**2, d) tokens."""
    img = frame.payload
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.shape != (config.img_hw, config.img_hw):
        raise ValueError(f"tokenize_image: expected {config.img_hw}x{config.img_hw} input, "
                         f"got {img.shape}")
    out = _conv_stack_forward(Tensor(img[None, None]), params.image_stack, config.d)
    return T.reshape(out, (config.grid ** 2, config.d))


def rasterize_points(points: np.ndarray, hw: int, x_range: tuple[float, float],
                     y_range: tuple[float, float]) -> np.ndarray:
    """Sum-pool point features onto an (hw, hw) grid; rows index y, columns
    index x; out-of-bounds points are dropped. Heights are discarded."""
    grid = np.zeros((hw, hw))
    points = np.asarray(points, dtype=np.float64)
    if points.size == 0:
        return grid
    if points.ndim != 2 or points.shape[1] != 4:
        raise ValueError(f"rasterize_points: expected (P, 4) points, got {points.shape}")
    x, y, feat = points[:, 0], points[:, 1], points[:, 3]
    keep = ((x >= x_range[0]) & (x < x_range[1]) & (y >= y_range[0]) & (y < y_range[1]))
    xs = ((x[keep] - x_range[0]) / (x_range[1] - x_range[0]) * hw).astype(int)
    ys = ((y[keep] - y_range[0]) / (y_range[1] - y_range[0]) * hw).astype(int)
    np.add.at(grid, (ys, xs), feat[keep])
    return grid


def tokenize_pointcloud(frame: ModalityFrame, params: TokenizerParams,
                        config: ModelConfig) -> Tensor:
    """One point list -> BEV raster -> (bev_grid**2, d) tokens."""
    grid = rasterize_points(frame.payload, config.bev_hw, config.bev_x_range,
                            config.bev_y_range)
    out = _conv_stack_forward(Tensor(grid[None, None]), params.pc_stack, config.d)
    return T.reshape(out, (config.bev_grid ** 2, config.d))


def select_radar_rows(rows: np.ndarray, n_rad: int) -> np.ndarray:
    """Keep the n_rad strongest returns (4th column magnitude, ties to the
    lower row index), in rank order, zero-padded to n_rad rows."""
    rows = np.asarray(rows, dtype=np.float64).reshape(-1, 4) if np.asarray(rows).size else \
        np.zeros((0, 4))
    order = np.argsort(-np.abs(rows[:, 3]), kind="stable")[:n_rad]
    out = np.zeros((n_rad, 4))
    out[:len(order)] = rows[order]
    return out


def tokenize_radar(frame: ModalityFrame, params: TokenizerParams, config: ModelConfig) -> Tensor:
    """Detection rows -> (n_rad, d) tokens."""
    return _mlp_forward(Tensor(select_radar_rows(frame.payload, config.n_rad)),
                        params.radar_mlp)


def tokenize_scalar(frame: ModalityFrame, params: TokenizerParams, config: ModelConfig) -> Tensor:
    """GPS 2-vector or RSSI scalar -> (1, d) token."""
    if frame.kind == "gps":
        vec, mlp = frame.payload.reshape(-1), params.gps_mlp
        if vec.shape != (2,):
            raise ValueError(f"tokenize_scalar: gps payload must be a 2-vector, got {vec.shape}")
    elif frame.kind == "rssi":
        vec, mlp = frame.payload.reshape(-1), params.rssi_mlp
        if vec.shape != (1,):
            raise ValueError(f"tokenize_scalar: rssi payload must be a scalar, got {vec.shape}")
    else:
        raise ValueError(f"tokenize_scalar: unsupported kind {frame.kind!r}")
    return _mlp_forward(Tensor(vec[None, :]), mlp)


# ---------------------------------------------------------------------------
# assembly


def build_layout(config: ModelConfig) -> SequenceLayout:
    kinds, frames, within, is_cls = [-1], [-1], [-1], [True]
    per_frame = tokens_per_frame(config)
    for t in range(config.tau):
        for kind, n in per_frame.items():
            kinds.extend([KIND_IDS[kind]] * n)
            frames.extend([t] * n)
            within.extend(range(n))
            is_cls.extend([False] * n)
    return SequenceLayout(np.array(kinds), np.array(frames), np.array(within),
                          np.array(is_cls))


def _pos_table(params: TokenizerParams, kind: str) -> Tensor:
    return {"image": params.pos_image, "pointcloud": params.pos_pc,
            "radar": params.pos_radar, "gps": params.pos_gps,
            "rssi": params.pos_rssi}[kind]


def _batched_raw_tokens(kind: str, stacked: np.ndarray, params: TokenizerParams,
                        config: ModelConfig) -> Tensor:
    """(B, tau, ...) raw modality arrays -> (B, tau, n_kind, d) tokens."""
    b = stacked.shape[0]
    tau = config.tau
    if kind in ("image", "pointcloud"):
        hw = config.img_hw if kind == "image" else config.bev_hw
        stack = params.image_stack if kind == "image" else params.pc_stack
        flat = Tensor(stacked.reshape(b * tau, 1, hw, hw))
        toks = _conv_stack_forward(flat, stack, config.d)
        n = (hw // 16) ** 2
    elif kind == "radar":
        toks = _mlp_forward(Tensor(stacked.reshape(b * tau, config.n_rad, 4)),
                            params.radar_mlp)
        n = config.n_rad
    elif kind == "gps":
        toks = _mlp_forward(Tensor(stacked.reshape(b * tau, 1, 2)), params.gps_mlp)
        n = 1
    else:
        toks = _mlp_forward(Tensor(stacked.reshape(b * tau, 1, 1)), params.rssi_mlp)
        n = 1
    return T.reshape(toks, (b, tau, n, config.d))


def assemble_batch(batch: dict[str, np.ndarray], params: TokenizerParams,
                   config: ModelConfig) -> TokenSequence:
    """Preprocessed per-modality arrays -> (B, N, d) embedded token sequence.

    ``batch`` maps modality -> stacked array with leading (B, tau) axes:
    image (B,tau,H,W), pointcloud rasters (B,tau,H,W), radar (B,tau,n_rad,4),
    gps (B,tau,2), rssi (B,tau,1).
    """
    missing = [k for k in config.modalities if k not in batch]
    if missing:
        raise ValueError(f"assemble_batch: missing modalities {missing}")
    per_frame = tokens_per_frame(config)
    b = next(iter(batch.values())).shape[0]
    d = config.d
    time_rows = T.reshape(params.time_embed, (1, config.tau, 1, d))
    chunks = []
    for kind in per_frame:
        toks = _batched_raw_tokens(kind, np.asarray(batch[kind], dtype=np.float64),
                                   params, config)
        pos = _pos_table(params, kind)
        mod_row = T.reshape(T.embedding_lookup(params.modality_embed,
                                               np.array([KIND_IDS[kind]])), (1, 1, 1, d))
        chunks.append(T.add(T.add(toks, pos), T.add(time_rows, mod_row)))
    body = T.reshape(T.concat(*chunks, axis=2) if len(chunks) > 1 else chunks[0],
                     (b, config.tau * int(np.sum(list(per_frame.values()))), d))
    cls_rows = T.add(Tensor(np.zeros((b, 1, d))), T.reshape(params.cls, (1, 1, d)))
    tokens = T.concat(cls_rows, body, axis=1)
    return TokenSequence(tokens, build_layout(config))


def preprocess_sample(sample: dict, config: ModelConfig) -> dict[str, np.ndarray]:
    """Raw per-sample modality payloads -> fixed-shape (tau, ...) arrays.

    ``sample`` holds "image" (tau,H,W), "pointcloud"/"radar" as lists of tau
    variable-length arrays, "gps" (tau,2), "rssi" (tau,1). Rasterization and
    radar ranking happen here, once, so batches can be pure stacks.
    """
    out = {}
    for kind in config.modalities:
        if kind == "image":
            img = np.asarray(sample["image"], dtype=np.float64)
            if img.ndim == 4 and img.shape[3] == 1:
                img = img[:, :, :, 0]
            if img.shape != (config.tau, config.img_hw, config.img_hw):
                raise ValueError(f"preprocess_sample: image stack is {img.shape}, expected "
                                 f"({config.tau}, {config.img_hw}, {config.img_hw})")
            out[kind] = img
        elif kind == "pointcloud":
            out[kind] = np.stack([
                rasterize_points(pts, config.bev_hw, config.bev_x_range, config.bev_y_range)
                for pts in sample["pointcloud"]])
        elif kind == "radar":
            out[kind] = np.stack([select_radar_rows(rows, config.n_rad)
                                  for rows in sample["radar"]])
        elif kind == "gps":
            out[kind] = np.asarray(sample["gps"], dtype=np.float64).reshape(config.tau, 2)
        else:
            out[kind] = np.asarray(sample["rssi"], dtype=np.float64).reshape(config.tau, 1)
    return out


def assemble_sequence(frames: list[ModalityFrame], params: TokenizerParams,
                      config: ModelConfig) -> TokenSequence:
    """Per-frame modality readings -> (N, d) embedded token sequence."""
    want = {(kind, t) for kind in config.modalities for t in range(config.tau)}
    have = {(f.kind, f.frame_index) for f in frames}
    gaps = sorted(want - have)
    if gaps:
        raise ValueError(f"assemble_sequence: missing frames {gaps}")
    by_key = {(f.kind, f.frame_index): f for f in frames}
    sample = {}
    for kind in config.modalities:
        series = [by_key[(kind, t)].payload for t in range(config.tau)]
        sample[kind] = series if kind in ("pointcloud", "radar") else np.stack([
            p[:, :, 0] if (kind == "image" and p.ndim == 3 and p.shape[2] == 1) else p
            for p in series])
    batch = {k: v[None] for k, v in preprocess_sample(sample, config).items()}
    seq = assemble_batch(batch, params, config)
    return TokenSequence(T.reshape(seq.tokens, (count_tokens(config), config.d)), seq.layout)
