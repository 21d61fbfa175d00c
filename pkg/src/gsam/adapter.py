"""Spatial-multiscale bottleneck adapter.

The adapter projects tokens down to a small bottleneck, runs up to five
parallel convolutions over the token grid (1x1, 3x3 and three dilated 3x3),
sums them, and projects back up. With no branches it is the plain
FC-activation-FC adapter.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict, FrozenSet, List, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import ConfigurationError, Conv2d, ConvSpec, Linear

BRANCHES = ("conv1x1", "conv3x3", "dilated_r1", "dilated_r2", "dilated_r3")
DILATED = ("dilated_r1", "dilated_r2", "dilated_r3")

_ACTIVATIONS = {"relu": F.relu, "gelu": F.gelu, "tanh": torch.tanh}


@dataclass(frozen=True)
class AdapterConfig:
    embed_dim: int = 96
    bottleneck_dim: int = 8
    branch_set: FrozenSet[str] = frozenset(BRANCHES)
    rates: Tuple[int, int, int] = (12, 24, 36)
    scale: float = 1.0
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "branch_set", frozenset(self.branch_set))
        object.__setattr__(self, "rates", tuple(self.rates))
        unknown = self.branch_set - set(BRANCHES)
        if unknown:
            raise ConfigurationError(f"unknown adapter branches {sorted(unknown)}")
        if not 0 < self.bottleneck_dim < self.embed_dim:
            raise ConfigurationError("bottleneck_dim must be positive and smaller than embed_dim")
        if len(self.rates) != 3 or min(self.rates) < 1 or list(self.rates) != sorted(set(self.rates)):
            raise ConfigurationError(f"rates must be three strictly increasing positive ints, got {self.rates}")
        if self.scale <= 0:
            raise ConfigurationError("scale must be positive")
        if self.activation not in _ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")

    def branch_spec(self, branch: str) -> ConvSpec:
        d = self.bottleneck_dim
        if branch == "conv1x1":
            return ConvSpec.same(d, d, 1)
        if branch == "conv3x3":
            return ConvSpec.same(d, d, 3)
        rate = self.rates[DILATED.index(branch)]
        return ConvSpec.same(d, d, 3, dilation_rate=rate)

    def to_dict(self) -> dict:
        return {
            "embed_dim": self.embed_dim,
            "bottleneck_dim": self.bottleneck_dim,
            "branch_set": sorted(self.branch_set, key=BRANCHES.index),
            "rates": list(self.rates),
            "scale": self.scale,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AdapterConfig":
        return cls(**d)


class SMAdapter(nn.Module):
    def __init__(self, cfg: AdapterConfig):
        super().__init__()
        self.cfg = cfg
        self.down_proj = Linear(cfg.embed_dim, cfg.bottleneck_dim)
        self.branches = nn.ModuleDict(
            {name: Conv2d(cfg.branch_spec(name)) for name in BRANCHES if name in cfg.branch_set}
        )
        self.up_proj = Linear(cfg.bottleneck_dim, cfg.embed_dim)
        # start as a zero residual so the host block is unchanged at init
        nn.init.zeros_(self.up_proj.weight)
        nn.init.zeros_(self.up_proj.bias)
        self.act = _ACTIVATIONS[cfg.activation]

    def branch_sum(self, tokens: torch.Tensor) -> torch.Tensor:
        """Pre-activation bottleneck features, ``[B, Ht, Wt, bottleneck]``."""
        h = self.down_proj(tokens)
        if not self.branches:
            return h
        x = h.permute(0, 3, 1, 2)
        s = sum(branch(x) for branch in self.branches.values())
        return s.permute(0, 2, 3, 1)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.dim() != 4 or tokens.shape[-1] != self.cfg.embed_dim:
            raise ConfigurationError(
                f"expected [B, Ht, Wt, {self.cfg.embed_dim}], got {tuple(tokens.shape)}")
        return self.cfg.scale * self.up_proj(self.act(self.branch_sum(tokens)))


# Table-row display names; keys double as CLI variant names.
VARIANT_NAMES: Dict[str, str] = {
    "adaptformer": "AdaptFormer",
    "no_conv": "w/o ALL Convolutions",
    "no_dilated": "w/o ALL Dilated Convolutions",
    "no_conv1x1": "w/o 1x1 Convolution",
    "no_conv3x3": "w/o 3x3 Convolution",
    "no_dilated_r1": "w/o Dilated Convolution(r={r1})",
    "no_dilated_r2": "w/o Dilated Convolution(r={r2})",
    "no_dilated_r3": "w/o Dilated Convolution(r={r3})",
    "full": "SM-AdaptFormer(Ours)",
}

# Original AdaptFormer residual scaling factor.
ADAPTFORMER_SCALE = 0.1


@dataclass(frozen=True)
class AdapterVariant:
    key: str
    name: str
    config: AdapterConfig


def ablation_variants(cfg: AdapterConfig) -> List[AdapterVariant]:
    """The nine ablation rows, from plain AdaptFormer to the full five-branch adapter."""
    if cfg.branch_set != frozenset(BRANCHES):
        raise ConfigurationError("ablation variants are derived from the full five-branch config")
    r1, r2, r3 = cfg.rates
    full = set(BRANCHES)
    sets = {
        "adaptformer": set(),
        "no_conv": set(),
        "no_dilated": {"conv1x1", "conv3x3"},
        "no_conv1x1": full - {"conv1x1"},
        "no_conv3x3": full - {"conv3x3"},
        "no_dilated_r1": full - {"dilated_r1"},
        "no_dilated_r2": full - {"dilated_r2"},
        "no_dilated_r3": full - {"dilated_r3"},
        "full": full,
    }
    out = []
    for key, branches in sets.items():
        variant_cfg = replace(cfg, branch_set=frozenset(branches))
        if key == "adaptformer":
            variant_cfg = replace(variant_cfg, scale=ADAPTFORMER_SCALE)
        out.append(AdapterVariant(key, VARIANT_NAMES[key].format(r1=r1, r2=r2, r3=r3), variant_cfg))
    return out


def variant_config(cfg: AdapterConfig, key: str) -> AdapterConfig:
    base = replace(cfg, branch_set=frozenset(BRANCHES))
    for v in ablation_variants(base):
        if v.key == key:
            return v.config
    raise ConfigurationError(f"unknown adapter variant {key!r}; choose from {list(VARIANT_NAMES)}")
