"""Analytical multiply-accumulate (MAC) cost model.

Counting convention: one MAC per multiply-add. Convolutions cost
``out_c * (in_c / groups) * k^2 * H_out * W_out`` (taps landing on zero
padding included), linear layers ``N * in * out`` over N tokens, attention
``N^2 * C`` each for the score matrix and the weighted sum. Softmax, norms,
activations, bilinear resizes and residual additions count as zero. Batch
size is 1.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, List, Sequence, Tuple

import torch

from .adapter import BRANCHES
from .cnn_encoder import CnnConfig
from .image_encoder import EncoderConfig
from .layers import Attention, ConvSpec, total_forward_macs
from .model import ModelConfig, padded_size

HEADER = ("MACs: multiply-adds only, batch 1; softmax, normalization, activations, "
          "bilinear resize and additions counted as 0")


@dataclass(frozen=True)
class CostEntry:
    layer_name: str
    layer_kind: str
    input_dims: Tuple[int, ...]
    macs: int
    params: int


@dataclass
class CostReport:
    entries: List[CostEntry] = field(default_factory=list)

    @property
    def total_macs(self) -> int:
        return sum(e.macs for e in self.entries)

    @property
    def total_params(self) -> int:
        return sum(e.params for e in self.entries)

    def __add__(self, other: "CostReport") -> "CostReport":
        return CostReport(self.entries + other.entries)

    def by_prefix(self, prefix: str) -> "CostReport":
        return CostReport([e for e in self.entries if e.layer_name.startswith(prefix)])

    def to_json(self) -> str:
        return json.dumps({
            "header": HEADER,
            "total_macs": self.total_macs,
            "total_params": self.total_params,
            "entries": [asdict(e) for e in self.entries],
        }, indent=2)


class _Builder:
    def __init__(self):
        self.entries: List[CostEntry] = []

    def conv(self, name: str, spec: ConvSpec, h: int, w: int, bias: bool = True) -> Tuple[int, int]:
        params = spec.out_channels * (spec.in_channels // spec.groups) * spec.kernel ** 2
        params += spec.out_channels if bias else 0
        self.entries.append(CostEntry(name, "conv", (spec.in_channels, h, w), spec.macs(h, w), params))
        return spec.output_size(h, w)

    def linear(self, name: str, n: int, fin: int, fout: int) -> None:
        self.entries.append(CostEntry(name, "linear", (n, fin), n * fin * fout, fin * fout + fout))

    def norm(self, name: str, dims: Tuple[int, ...], channels: int) -> None:
        self.entries.append(CostEntry(name, "norm", dims, 0, 2 * channels))


def cnn_cost(cfg: CnnConfig, h: int, w: int, prefix: str = "cnn") -> CostReport:
    b = _Builder()
    s = cfg.tap_stride
    h, w = h - h % s, w - w % s
    chans = (3,) + cfg.stage_channels[: cfg.tap_stage + 1]
    for i, (cin, cout) in enumerate(zip(chans[:-1], chans[1:])):
        p = f"{prefix}.stages.{i}"
        h2, w2 = b.conv(f"{p}.conv1", ConvSpec(cin, cout, 3, stride=2, padding=1), h, w)
        b.norm(f"{p}.norm1", (cout, h2, w2), cout)
        b.conv(f"{p}.conv2", ConvSpec.same(cout, cout, 3), h2, w2)
        b.norm(f"{p}.norm2", (cout, h2, w2), cout)
        b.conv(f"{p}.shortcut", ConvSpec(cin, cout, 1, stride=2), h, w)
        h, w = h2, w2
    tap_c = cfg.stage_channels[cfg.tap_stage]
    b.conv(f"{prefix}.proj_pre", ConvSpec(tap_c, cfg.proj_dim, 1), h, w)
    if cfg.separate_projections:
        b.conv(f"{prefix}.proj_post", ConvSpec(tap_c, cfg.proj_dim, 1), h, w)
    return CostReport(b.entries)


def encoder_cost(cfg: EncoderConfig, h: int, w: int, prefix: str = "encoder") -> CostReport:
    """Cost of the transformer path on an already patch-aligned ``h x w`` image."""
    b = _Builder()
    p, c = cfg.patch_size, cfg.embed_dim
    gh, gw = b.conv(f"{prefix}.patch_embed", ConvSpec(3, c, kernel=p, stride=p), h, w)
    n = gh * gw
    if cfg.use_peg:
        b.conv(f"{prefix}.peg.proj", ConvSpec.same(c, c, 3, groups=c), gh, gw)
    a = cfg.adapter
    for i in range(cfg.depth):
        q = f"{prefix}.blocks.{i}"
        b.norm(f"{q}.norm1", (n, c), c)
        b.linear(f"{q}.attn.qkv", n, c, 3 * c)
        score = Attention.score_macs(n, c)
        b.entries.append(CostEntry(f"{q}.attn.scores", "attention_scores", (n, c), score, 0))
        b.entries.append(CostEntry(f"{q}.attn.weighted_sum", "attention_weighted_sum", (n, c), score, 0))
        b.linear(f"{q}.attn.proj", n, c, c)
        b.norm(f"{q}.norm2", (n, c), c)
        b.linear(f"{q}.mlp.fc1", n, c, cfg.mlp_dim)
        b.linear(f"{q}.mlp.fc2", n, cfg.mlp_dim, c)
        b.linear(f"{q}.adapter.down_proj", n, c, a.bottleneck_dim)
        for name in sorted(a.branch_set, key=BRANCHES.index):
            b.conv(f"{q}.adapter.branches.{name}", a.branch_spec(name), gh, gw)
        b.linear(f"{q}.adapter.up_proj", n, a.bottleneck_dim, c)
    return CostReport(b.entries)


def decoder_cost(cfg: ModelConfig, gh: int, gw: int, prefix: str = "decoder") -> CostReport:
    b = _Builder()
    dims = (cfg.encoder.embed_dim,) + cfg.decoder_channels
    h, w = gh, gw
    b.norm(f"{prefix}.norm_in", (dims[0], h, w), dims[0])
    for i, (cin, cout) in enumerate(zip(dims[:-1], dims[1:])):
        b.conv(f"{prefix}.convs.{i}", ConvSpec.same(cin, cout, 3), h, w)
        b.norm(f"{prefix}.norms.{i}", (cout, h, w), cout)
        h, w = 2 * h, 2 * w
    b.conv(f"{prefix}.classifier", ConvSpec(dims[-1], cfg.num_classes, 1), h, w)
    return CostReport(b.entries)


def count_macs(config: ModelConfig, input_size: Tuple[int, int]) -> CostReport:
    h, w = input_size
    p = config.encoder.patch_size
    if h < p or w < p:
        raise ValueError(f"input size {h}x{w} smaller than patch size {p}")
    ph, pw = padded_size(h, w, p)
    return (cnn_cost(config.cnn, ph, pw)
            + encoder_cost(config.encoder, ph, pw)
            + decoder_cost(config, ph // p, pw // p))


def forward_macs(model, input_size: Tuple[int, int]) -> int:
    """MACs booked by the layer hooks during one live forward pass at batch 1."""
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        model(torch.zeros(1, 3, *input_size, dtype=dtype))
    return total_forward_macs(model)


def parse_size(text: str) -> Tuple[int, int]:
    """``"128"`` -> (128, 128); ``"128x96"`` -> (128, 96)."""
    parts = text.lower().split("x")
    if len(parts) == 1:
        return int(parts[0]), int(parts[0])
    if len(parts) == 2:
        return int(parts[0]), int(parts[1])
    raise ValueError(f"bad size {text!r}; use H or HxW")


def size_sweep(config: ModelConfig, sizes: Sequence[Tuple[int, int]]) -> List[dict]:
    if not sizes:
        raise ValueError("sizes must be non-empty")
    rows = []
    for h, w in sizes:
        rep = count_macs(config, (h, w))
        rows.append({"size_h": h, "size_w": w, "total_macs": rep.total_macs,
                     "total_params": rep.total_params})
    return rows


def rows_to_csv(rows: Iterable[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["size_h", "size_w", "total_macs", "total_params"],
                            lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()
