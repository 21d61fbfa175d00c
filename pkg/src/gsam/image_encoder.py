"""Variable-size ViT-style encoder: patch embedding, PEG, and adapter-carrying blocks."""

from __future__ import annotations

import fnmatch
import warnings
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .adapter import AdapterConfig, SMAdapter
from .layers import Attention, ConfigurationError, Conv2d, ConvSpec, LayerNorm, Linear
from .peg import PEG

# Attention and FFN projections inside every block; norms, patch embedding,
# PEG and adapters stay learnable.
DEFAULT_FROZEN = (
    "*blocks.*.attn.qkv.*",
    "*blocks.*.attn.proj.*",
    "*blocks.*.mlp.fc1.*",
    "*blocks.*.mlp.fc2.*",
)


@dataclass(frozen=True)
class FreezePolicy:
    frozen_name_patterns: Tuple[str, ...] = DEFAULT_FROZEN

    def __post_init__(self):
        object.__setattr__(self, "frozen_name_patterns", tuple(self.frozen_name_patterns))

    def matches(self, name: str) -> bool:
        return any(fnmatch.fnmatchcase(name, p) for p in self.frozen_name_patterns)


@dataclass(frozen=True)
class EncoderConfig:
    patch_size: int = 16
    embed_dim: int = 96
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    use_peg: bool = True

    def __post_init__(self):
        if self.patch_size < 1 or self.depth < 1 or self.embed_dim < 1 or self.num_heads < 1:
            raise ConfigurationError("patch_size, depth, embed_dim and num_heads must be positive")
        if self.embed_dim % self.num_heads:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.adapter.embed_dim != self.embed_dim:
            object.__setattr__(self, "adapter", replace(self.adapter, embed_dim=self.embed_dim))

    @property
    def mlp_dim(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    def to_dict(self) -> dict:
        return {
            "patch_size": self.patch_size,
            "embed_dim": self.embed_dim,
            "depth": self.depth,
            "num_heads": self.num_heads,
            "mlp_ratio": self.mlp_ratio,
            "adapter": self.adapter.to_dict(),
            "use_peg": self.use_peg,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        d["adapter"] = AdapterConfig.from_dict(d["adapter"])
        return cls(**d)


class MLP(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = Linear(dim, hidden)
        self.fc2 = Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block with the adapter running parallel to the FFN."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.norm1 = LayerNorm(cfg.embed_dim)
        self.attn = Attention(cfg.embed_dim, cfg.num_heads)
        self.norm2 = LayerNorm(cfg.embed_dim)
        self.mlp = MLP(cfg.embed_dim, cfg.mlp_dim)
        self.adapter = SMAdapter(cfg.adapter)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x)) + self.adapter(x)


class ImageEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        p = cfg.patch_size
        self.patch_embed = Conv2d(ConvSpec(3, cfg.embed_dim, kernel=p, stride=p))
        self.peg = PEG(cfg.embed_dim) if cfg.use_peg else None
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.depth))

    def grid_size(self, h: int, w: int) -> Tuple[int, int]:
        p = self.cfg.patch_size
        if h % p or w % p:
            raise ValueError(f"image {h}x{w} is not a multiple of patch size {p}; pad it first")
        return h // p, w // p

    def forward(self, image: torch.Tensor, injected_pre: Optional[torch.Tensor] = None,
                injected_post: Optional[torch.Tensor] = None) -> torch.Tensor:
        grid = self.grid_size(image.shape[-2], image.shape[-1])
        expected = (image.shape[0], *grid, self.cfg.embed_dim)
        for name, inj in (("injected_pre", injected_pre), ("injected_post", injected_post)):
            if inj is not None and tuple(inj.shape) != expected:
                raise ConfigurationError(f"{name} has shape {tuple(inj.shape)}, expected {expected}")
        x = self.patch_embed(image).permute(0, 2, 3, 1)
        if injected_pre is not None:
            x = x + injected_pre
        if self.peg is not None:
            x = self.peg(x)
        for blk in self.blocks:
            x = blk(x)
        if injected_post is not None:
            x = x + injected_post
        return x


def encode(encoder: ImageEncoder, image: torch.Tensor, injected_pre=None, injected_post=None):
    return encoder(image, injected_pre, injected_post)


def apply_freeze(module: nn.Module, policy: FreezePolicy) -> List[str]:
    """Flag parameters matching the policy as frozen; unfreeze the rest.

    Returns the frozen names. Patterns that match nothing trigger a warning,
    since that is usually a typo.
    """
    names = [n for n, _ in module.named_parameters()]
    for pattern in policy.frozen_name_patterns:
        if not any(fnmatch.fnmatchcase(n, pattern) for n in names):
            warnings.warn(f"freeze pattern {pattern!r} matches no parameter", stacklevel=2)
    frozen = []
    for name, p in module.named_parameters():
        is_frozen = policy.matches(name)
        p.requires_grad_(not is_frozen)
        if is_frozen:
            frozen.append(name)
    return frozen


def partition(module: nn.Module) -> Dict[str, List[str]]:
    out: Dict[str, List[str]] = {"frozen": [], "learnable": []}
    for name, p in module.named_parameters():
        out["learnable" if p.requires_grad else "frozen"].append(name)
    return out
