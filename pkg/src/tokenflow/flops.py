"""Analytic FLOPs and activation-memory accounting.

Conventions, applied uniformly and spelled out so the numbers are
reproducible:

- one multiply-accumulate = 2 FLOPs, so a matmul over rows x in x out costs
  2 * rows * in * out and a bias add costs rows * out
- softmax, layernorm, and GELU cost 5 FLOPs per element; the attention scale
  multiply costs 1 per score; a 2x2 max pool costs 3 comparisons per output
- top-K selection costs N * log2(K) comparisons
- activation memory: a linear holds rows * (in + out) elements, a conv holds
  h_in^2 * c_in + h_out^2 * c_out, attention holds K * d (its context rows),
  the materialized score matrix holds heads * K^2, and a router holds
  K * d + d; in-place elementwise work is not charged
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

from .config import ModelConfig
from .tokenizers import conv_plan, count_tokens, tokens_per_frame


@dataclass
class FlopsEntry:
    name: str
    flops: int
    memory: int


@dataclass
class FlopsReport:
    entries: list[FlopsEntry]
    budget: float | None = None
    verdict: str | None = None

    @property
    def total_flops(self) -> int:
        return sum(e.flops for e in self.entries)

    @property
    def total_memory(self) -> int:
        return sum(e.memory for e in self.entries)

    def component(self, prefix: str) -> int:
        return sum(e.flops for e in self.entries if e.name.startswith(prefix))

    def to_dict(self) -> dict:
        return {"entries": [{"name": e.name, "flops": e.flops, "memory": e.memory}
                            for e in self.entries],
                "total_flops": self.total_flops, "total_memory": self.total_memory,
                "budget": self.budget, "verdict": self.verdict}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        width = max(len(e.name) for e in self.entries) + 2
        lines = [f"{'component':<{width}}{'flops':>16}{'memory_bytes':>16}"]
        for e in self.entries:
            lines.append(f"{e.name:<{width}}{e.flops:>16,}{e.memory:>16,}")
        lines.append(f"{'total':<{width}}{self.total_flops:>16,}{self.total_memory:>16,}")
        if self.verdict is not None:
            lines.append(f"budget {self.budget:,.0f}: {self.verdict}")
        return "\n".join(lines)


def _linear(rows: int, d_in: int, d_out: int, elem: int, gelu: bool = False):
    flops = 2 * rows * d_in * d_out + rows * d_out
    if gelu:
        flops += 5 * rows * d_out
    return flops, rows * (d_in + d_out) * elem


def _conv_stack(hw: int, c0: int, d: int, elem: int):
    """FLOPs and memory for one conv tokenizer pass over a single frame."""
    flops = 0
    memory = 0
    for layer in conv_plan(hw, 1, c0, d):
        area = layer["h_out"] ** 2
        flops += 2 * area * layer["k"] ** 2 * layer["c_in"] * layer["c_out"]
        flops += area * layer["c_out"]  # bias
        memory += (layer["h_in"] ** 2 * layer["c_in"] + area * layer["c_out"]) * elem
    h, hp = hw // 2, hw // 4
    h1, h2 = hw // 8, hw // 16
    c1 = 2 * c0
    flops += 5 * h * h * c0          # stem gelu
    flops += 3 * hp * hp * c0        # 2x2 max pool comparisons
    for g in (h1, h2):               # per residual block: conv1 gelu, add, out gelu
        flops += 5 * g * g * c1 + g * g * c1 + 5 * g * g * c1
    return flops, memory


def _tokenizer_entries(config: ModelConfig, elem: int) -> list[FlopsEntry]:
    entries = []
    per_frame = tokens_per_frame(config)
    d = config.d
    for kind in per_frame:
        if kind == "image":
            f, m = _conv_stack(config.img_hw, config.conv_width, d, elem)
        elif kind == "pointcloud":
            f, m = _conv_stack(config.bev_hw, config.conv_width, d, elem)
        else:
            rows = per_frame[kind]
            d_in = {"radar": 4, "gps": 2, "rssi": 1}[kind]
            f1, m1 = _linear(rows, d_in, config.scalar_hidden, elem, gelu=True)
            f2, m2 = _linear(rows, config.scalar_hidden, d, elem)
            f, m = f1 + f2, m1 + m2
        entries.append(FlopsEntry(f"tokenizer.{kind}", config.tau * f, config.tau * m))
    n = count_tokens(config)
    # positional + time + modality adds on every body token, CLS broadcast
    entries.append(FlopsEntry("assembly", 3 * (n - 1) * d + d, n * d * elem))
    return entries


def _block_entries(idx: int, k: int, n: int, config: ModelConfig,
                   elem: int) -> list[FlopsEntry]:
    d, dff, dr, heads = config.d, config.d_ff, config.d_router, config.heads
    router_f = (2 * n * d * dr + n * dr) + 5 * n * dr + (2 * n * dr + n)
    router_f += int(round(n * math.log2(k))) if k > 1 else 0
    qkvo_f = 4 * (2 * k * d * d + k * d)
    attn_f = 4 * k * k * d
    soft_f = heads * k * k + 5 * heads * k * k
    mlp_f = (2 * k * d * dff + k * dff) + 5 * k * dff + (2 * k * dff * d + k * d)
    # ln1 + ln2 at 5/elem, gate multiply, attention residual, delta sum,
    # scatter-back add
    elementwise_f = 10 * k * d + 4 * k * d
    name = f"block{idx}"
    return [
        FlopsEntry(f"{name}.router", router_f, (k * d + d) * elem),
        FlopsEntry(f"{name}.qkvo", qkvo_f, 4 * k * 2 * d * elem),
        FlopsEntry(f"{name}.attention", attn_f, k * d * elem),
        FlopsEntry(f"{name}.softmax", soft_f, heads * k * k * elem),
        FlopsEntry(f"{name}.mlp", mlp_f, 2 * k * (d + dff) * elem),
        FlopsEntry(f"{name}.elementwise", elementwise_f, 0),
    ]


def _widths(config: ModelConfig, k_per_block) -> list[int]:
    n = count_tokens(config)
    ks = [k_per_block] * config.blocks if isinstance(k_per_block, int) else list(k_per_block)
    if len(ks) != config.blocks:
        raise ValueError(f"expected {config.blocks} block widths, got {len(ks)}")
    for k in ks:
        if not 1 <= k <= n:
            raise ValueError(f"block width {k} out of range 1..{n}")
    return ks


def _enumerate(config: ModelConfig, k_per_block, elem: int) -> list[FlopsEntry]:
    n = count_tokens(config)
    entries = _tokenizer_entries(config, elem)
    for i, k in enumerate(_widths(config, k_per_block)):
        entries.extend(_block_entries(i, k, n, config, elem))
    head_f = 5 * config.d + 2 * config.d * config.out_dim + config.out_dim
    entries.append(FlopsEntry("head", head_f, (config.d + config.out_dim) * elem))
    return entries


def count_flops(config: ModelConfig, k_per_block) -> FlopsReport:
    """Single-sample inference cost at the given per-block token widths.

    ``k_per_block`` is one integer (uniform) or a length-L sequence.
    """
    return FlopsReport(_enumerate(config, k_per_block, elem=4))


def estimate_memory(config: ModelConfig, k_per_block, elem_bytes: int = 4) -> dict[str, int]:
    """Per-component activation bytes under the documented conventions."""
    return {e.name: e.memory for e in _enumerate(config, k_per_block, elem_bytes)}


def check_budget(report: FlopsReport, gamma: float) -> str:
    if gamma <= 0:
        raise ValueError(f"check_budget: budget must be positive, got {gamma}")
    report.budget = gamma
    report.verdict = "within" if report.total_flops <= gamma else "over"
    return report.verdict
