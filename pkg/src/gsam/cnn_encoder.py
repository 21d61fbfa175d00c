"""Small residual CNN whose mid-level features are injected into the token stream."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import ConfigurationError, Conv2d, ConvSpec, LayerNorm2d


@dataclass(frozen=True)
class CnnConfig:
    stage_channels: Tuple[int, ...] = (16, 32, 64)
    tap_stage: int = 2
    proj_dim: int = 96
    separate_projections: bool = False

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))
        if not self.stage_channels or min(self.stage_channels) < 1:
            raise ConfigurationError("stage_channels must be non-empty positive ints")
        if not 0 <= self.tap_stage < len(self.stage_channels):
            raise ConfigurationError(
                f"tap_stage {self.tap_stage} out of range for {len(self.stage_channels)} stages")

    @property
    def tap_stride(self) -> int:
        """Cumulative downsampling factor at the tapped stage (each stage halves)."""
        return 2 ** (self.tap_stage + 1)

    def to_dict(self) -> dict:
        return {
            "stage_channels": list(self.stage_channels),
            "tap_stage": self.tap_stage,
            "proj_dim": self.proj_dim,
            "separate_projections": self.separate_projections,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CnnConfig":
        return cls(**d)


class ResStage(nn.Module):
    """Stride-2 basic residual block."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = Conv2d(ConvSpec(cin, cout, 3, stride=2, padding=1))
        self.norm1 = LayerNorm2d(cout)
        self.conv2 = Conv2d(ConvSpec.same(cout, cout, 3))
        self.norm2 = LayerNorm2d(cout)
        self.shortcut = Conv2d(ConvSpec(cin, cout, 1, stride=2))

    def forward(self, x):
        y = F.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return F.relu(y + self.shortcut(x))


class CnnEncoder(nn.Module):
    def __init__(self, cfg: CnnConfig):
        super().__init__()
        self.cfg = cfg
        chans = (3,) + cfg.stage_channels[: cfg.tap_stage + 1]
        self.stages = nn.ModuleList(ResStage(a, b) for a, b in zip(chans[:-1], chans[1:]))
        tap_c = cfg.stage_channels[cfg.tap_stage]
        self.proj_pre = Conv2d(ConvSpec(tap_c, cfg.proj_dim, 1))
        self.proj_post = Conv2d(ConvSpec(tap_c, cfg.proj_dim, 1)) if cfg.separate_projections else None

    def features(self, image: torch.Tensor) -> torch.Tensor:
        h, w = image.shape[-2:]
        s = self.cfg.tap_stride
        if h < s or w < s:
            raise ValueError(f"image {h}x{w} smaller than CNN stride {s}")
        # floor semantics: trailing rows/cols beyond a stride multiple are dropped
        x = image[..., : h - h % s, : w - w % s]
        for stage in self.stages:
            x = stage(x)
        return x

    def fuse(self, feat: torch.Tensor, grid: Tuple[int, int], post: bool = False) -> torch.Tensor:
        """Project to embed_dim, resize to the token grid and return ``[B, Ht, Wt, C]``."""
        proj = self.proj_post if (post and self.proj_post is not None) else self.proj_pre
        x = proj(feat)
        if tuple(x.shape[-2:]) != tuple(grid):
            x = F.interpolate(x, size=grid, mode="bilinear", align_corners=False)
        return x.permute(0, 2, 3, 1)

    def injections(self, image: torch.Tensor, grid: Tuple[int, int]) -> Tuple[torch.Tensor, torch.Tensor]:
        feat = self.features(image)
        pre = self.fuse(feat, grid)
        post = self.fuse(feat, grid, post=True) if self.proj_post is not None else pre
        return pre, post


def cnn_features(encoder: CnnEncoder, image: torch.Tensor) -> torch.Tensor:
    return encoder.features(image)


def fuse(encoder: CnnEncoder, cnn_feat: torch.Tensor, token_grid_dims: Tuple[int, int]) -> torch.Tensor:
    return encoder.fuse(cnn_feat, token_grid_dims)
