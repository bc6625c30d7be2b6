"""Full network: tokenizers, routed encoder blocks, head, losses, checkpoints.

Training runs each block under the bracketed dual pass so keep ratios stay
differentiable; inference runs a single pass at ceil(N * r_l). The head is a
single linear layer reading the CLS row after a final layernorm.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .keepratio import (KeepRatioParams, bracket_ratio, budget_penalty, dual_pass_combine,
                        inference_k, init_keep_ratios, mean_ratio)
from .routing import (BlockParams, init_block_params, routed_block_forward, score_tokens,
                      select_topk)
from .serial import read_tensor, write_tensor
from .tokenizers import (TokenizerParams, assemble_batch, count_tokens,
                         init_tokenizer_params)
from .tensor import Tensor

CHECKPOINT_MAGIC = b"TFCK"
CHECKPOINT_VERSION = 1


@dataclass
class ModelParams:
    tokenizer: TokenizerParams
    blocks: list[BlockParams]
    keep: KeepRatioParams
    ln_f_g: Tensor
    ln_f_b: Tensor
    head_w: Tensor
    head_b: Tensor


@dataclass
class BlockDiagnostics:
    ratio: float
    k_down: int
    k_up: int
    w_up: float


def init_model(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    d = config.d
    n = count_tokens(config)
    r_min = config.r_min if config.r_min is not None else 1.0 / n
    head_w = Tensor(np.clip(rng.normal(0.0, 0.02, size=(d, config.out_dim)), -0.04, 0.04),
                    requires_grad=True)
    return ModelParams(
        tokenizer=init_tokenizer_params(config, rng),
        blocks=[init_block_params(config, rng) for _ in range(config.blocks)],
        keep=init_keep_ratios(config.blocks, r_min, config.gamma_prime, config.lam),
        ln_f_g=Tensor(np.ones(d), requires_grad=True),
        ln_f_b=Tensor(np.zeros(d), requires_grad=True),
        head_w=head_w,
        head_b=Tensor(np.zeros(config.out_dim), requires_grad=True),
    )


def named_parameters(params: ModelParams) -> list[tuple[str, Tensor]]:
    """Flatten the parameter tree into (dotted name, tensor) pairs in a
    deterministic field-then-index order. Frozen tensors are included; what
    trains is the optimizer's concern, what exists is the checkpoint's."""
    out: list[tuple[str, Tensor]] = []

    def walk(obj, name):
        if isinstance(obj, Tensor):
            out.append((name, obj))
        elif dataclasses.is_dataclass(obj):
            for f in dataclasses.fields(obj):
                walk(getattr(obj, f.name), f"{name}.{f.name}" if name else f.name)
        elif isinstance(obj, (list, tuple)):
            for i, item in enumerate(obj):
                walk(item, f"{name}.{i}")

    walk(params, "")
    return out


def parameter_count(params: ModelParams) -> int:
    return sum(t.data.size for _, t in named_parameters(params))


def _block_scores(x: Tensor, block: BlockParams,
                  random_rng: np.random.Generator | None) -> Tensor:
    if random_rng is None:
        return score_tokens(x, block.router)
    # router-frozen ablation: fresh uniform scores every forward, off the graph
    b, n, _ = x.shape
    return Tensor(random_rng.uniform(0.0, 1.0, size=(b, n)))


def encode_train(tokens: Tensor, params: ModelParams, config: ModelConfig,
                 random_rng: np.random.Generator | None = None,
                 ) -> tuple[Tensor, list[BlockDiagnostics]]:
    """(B, N, d) embedded tokens -> (B, out_dim) logits plus per-block widths."""
    b, n, _ = tokens.shape
    x = tokens
    diags = []
    for block, ratio in zip(params.blocks, params.keep.ratios):
        r_val = float(ratio.data[0])
        bracket = bracket_ratio(r_val, n)
        decision = select_topk(_block_scores(x, block, random_rng), n)
        x = dual_pass_combine(x, decision, bracket, ratio, block, config)
        diags.append(BlockDiagnostics(r_val, bracket.k_down, bracket.k_up, bracket.w_up))
    cls = T.gather_rows(x, np.zeros((b, 1), dtype=np.int64), unique=True)
    cls = T.layernorm(cls, params.ln_f_g, params.ln_f_b)
    logits = T.linear(T.reshape(cls, (b, config.d)), params.head_w, params.head_b)
    return logits, diags


def encode_infer(tokens: Tensor, params: ModelParams, config: ModelConfig,
                 random_rng: np.random.Generator | None = None,
                 ratios: list[float] | None = None) -> Tensor:
    """Single-pass encoding at K_l = ceil(N * r_l); ``ratios`` overrides the
    learned values (used for forced-width benchmarks)."""
    b, n, _ = tokens.shape
    r_values = ratios if ratios is not None else params.keep.values()
    if len(r_values) != len(params.blocks):
        raise ValueError(f"encode_infer: {len(r_values)} ratios for "
                         f"{len(params.blocks)} blocks")
    x = tokens
    for block, r_val in zip(params.blocks, r_values):
        k = inference_k(float(r_val), n)
        decision = select_topk(_block_scores(x, block, random_rng), n)
        x = routed_block_forward(x, decision, k, block, config)
    cls = T.gather_rows(x, np.zeros((b, 1), dtype=np.int64), unique=True)
    cls = T.layernorm(cls, params.ln_f_g, params.ln_f_b)
    return T.linear(T.reshape(cls, (b, config.d)), params.head_w, params.head_b)


def forward_train(batch: dict[str, np.ndarray], params: ModelParams, config: ModelConfig,
                  random_rng: np.random.Generator | None = None,
                  ) -> tuple[Tensor, float, list[BlockDiagnostics]]:
    """Preprocessed modality batch -> (logits, mean keep ratio, diagnostics)."""
    seq = assemble_batch(batch, params.tokenizer, config)
    logits, diags = encode_train(seq.tokens, params, config, random_rng)
    return logits, mean_ratio(params.keep.ratios), diags


def forward_infer(batch: dict[str, np.ndarray], params: ModelParams, config: ModelConfig,
                  random_rng: np.random.Generator | None = None,
                  ratios: list[float] | None = None) -> Tensor:
    seq = assemble_batch(batch, params.tokenizer, config)
    return encode_infer(seq.tokens, params, config, random_rng, ratios)


def task_loss(logits: Tensor, targets: np.ndarray, config: ModelConfig) -> Tensor:
    if config.task == "beam":
        return T.cross_entropy_with_logits(logits, targets)
    return T.binary_cross_entropy_with_logits(logits, targets)


def total_loss(logits: Tensor, targets: np.ndarray, keep: KeepRatioParams,
               config: ModelConfig) -> Tensor:
    return T.add(task_loss(logits, targets, config),
                 budget_penalty(keep.ratios, keep.gamma_prime, keep.lam))


@dataclass
class BeamPrediction:
    top1: np.ndarray  # (B,)
    top3: np.ndarray  # (B, min(3, classes))
    top5: np.ndarray  # (B, min(5, classes))


def predict(logits: Tensor | np.ndarray, task: str) -> BeamPrediction | np.ndarray:
    """Beam: ranked index sets (ties to the lower index). Handover: per-vehicle
    0/1 flags, with the sigmoid boundary itself decided as 0."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if not np.isfinite(arr).all():
        raise ValueError("predict: non-finite logits")
    if task == "beam":
        order = np.argsort(-arr, axis=1, kind="stable")
        return BeamPrediction(order[:, 0], order[:, :min(3, arr.shape[1])],
                              order[:, :min(5, arr.shape[1])])
    if task == "handover":
        return (arr > 0.0).astype(np.int64)  # sigmoid(z) > 0.5 iff z > 0
    raise ValueError(f"predict: unknown task {task!r}")


def save_checkpoint(path: str, params: ModelParams, config: ModelConfig) -> None:
    pairs = named_parameters(params)
    manifest = json.dumps({"config": config.to_dict(),
                           "params": [name for name, _ in pairs]}).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(manifest)))
        fh.write(manifest)
        for _, tensor in pairs:
            write_tensor(fh, tensor.data)


def load_checkpoint(path: str) -> tuple[ModelParams, ModelConfig]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        header = fh.read(12)
        if len(header) != 12:
            raise ValueError("truncated checkpoint header")
        version, manifest_len = struct.unpack("<IQ", header)
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        raw = fh.read(manifest_len)
        if len(raw) != manifest_len:
            raise ValueError("truncated checkpoint manifest")
        manifest = json.loads(raw)
        config = ModelConfig.from_dict(manifest["config"])
        params = init_model(config, np.random.default_rng(0))
        pairs = named_parameters(params)
        if manifest["params"] != [name for name, _ in pairs]:
            raise ValueError("checkpoint parameter list does not match this configuration")
        for name, tensor in pairs:
            arr = read_tensor(fh)
            if arr.shape != tensor.data.shape:
                raise ValueError(f"checkpoint shape mismatch for {name}: "
                                 f"{arr.shape} vs {tensor.data.shape}")
            tensor.data = arr.astype(np.float64)
        if fh.read(1):
            raise ValueError("trailing bytes after checkpoint payload")
    return params, config
