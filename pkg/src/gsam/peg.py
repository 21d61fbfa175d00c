"""Positional encoding generator: a residual depthwise convolution over the token grid."""

from __future__ import annotations

import torch
import torch.nn as nn

from .layers import ConfigurationError, Conv2d, ConvSpec


class PEG(nn.Module):
    """``tokens + dwconv(tokens)`` on a ``[B, Ht, Wt, C]`` grid of any size.

    Weights start at zero, so a fresh layer is the identity map.
    """

    def __init__(self, embed_dim: int, kernel: int = 3):
        super().__init__()
        self.embed_dim = embed_dim
        self.proj = Conv2d(ConvSpec.same(embed_dim, embed_dim, kernel, groups=embed_dim))
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.dim() != 4 or tokens.shape[-1] != self.embed_dim:
            raise ConfigurationError(
                f"expected [B, Ht, Wt, {self.embed_dim}], got {tuple(tokens.shape)}")
        x = tokens.permute(0, 3, 1, 2)
        return tokens + self.proj(x).permute(0, 2, 3, 1)
