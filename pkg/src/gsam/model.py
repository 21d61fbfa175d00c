"""Full segmentation model: pad, CNN injections, encoder, dense decoder, crop."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .cnn_encoder import CnnConfig, CnnEncoder
from .image_encoder import EncoderConfig, FreezePolicy, ImageEncoder, apply_freeze
from .layers import ConfigurationError, Conv2d, ConvSpec, LayerNorm2d


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    cnn: CnnConfig = field(default_factory=CnnConfig)
    num_classes: int = 2
    decoder_channels: Tuple[int, ...] = (64, 32, 16)
    freeze: FreezePolicy = field(default_factory=FreezePolicy)

    def __post_init__(self):
        object.__setattr__(self, "decoder_channels", tuple(self.decoder_channels))
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be at least 2")
        if not self.decoder_channels or min(self.decoder_channels) < 1:
            raise ConfigurationError("decoder_channels must be non-empty positive ints")
        if self.cnn.proj_dim != self.encoder.embed_dim:
            object.__setattr__(self, "cnn", replace(self.cnn, proj_dim=self.encoder.embed_dim))

    def to_dict(self) -> dict:
        return {
            "encoder": self.encoder.to_dict(),
            "cnn": self.cnn.to_dict(),
            "num_classes": self.num_classes,
            "decoder_channels": list(self.decoder_channels),
            "freeze": list(self.freeze.frozen_name_patterns),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            encoder=EncoderConfig.from_dict(d["encoder"]),
            cnn=CnnConfig.from_dict(d["cnn"]),
            num_classes=d["num_classes"],
            decoder_channels=tuple(d["decoder_channels"]),
            freeze=FreezePolicy(tuple(d["freeze"])),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


class Decoder(nn.Module):
    """Input norm, then stages of conv3x3 -> norm -> GELU -> 2x bilinear upsample, then a 1x1 classifier."""

    def __init__(self, in_dim: int, channels: Tuple[int, ...], num_classes: int):
        super().__init__()
        dims = (in_dim,) + tuple(channels)
        self.norm_in = LayerNorm2d(in_dim)
        self.convs = nn.ModuleList(Conv2d(ConvSpec.same(a, b, 3)) for a, b in zip(dims[:-1], dims[1:]))
        self.norms = nn.ModuleList(LayerNorm2d(b) for b in dims[1:])
        self.classifier = Conv2d(ConvSpec(dims[-1], num_classes, 1))

    def forward(self, x: torch.Tensor, out_size: Tuple[int, int]) -> torch.Tensor:
        x = self.norm_in(x)
        for conv, norm in zip(self.convs, self.norms):
            x = F.gelu(norm(conv(x)))
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = self.classifier(x)
        if tuple(x.shape[-2:]) != tuple(out_size):
            x = F.interpolate(x, size=out_size, mode="bilinear", align_corners=False)
        return x


def padded_size(h: int, w: int, patch: int) -> Tuple[int, int]:
    return -(-h // patch) * patch, -(-w // patch) * patch


class GSAM(nn.Module):
    def __init__(self, cfg: ModelConfig, apply_policy: bool = True):
        super().__init__()
        self.cfg = cfg
        self.cnn = CnnEncoder(cfg.cnn)
        self.encoder = ImageEncoder(cfg.encoder)
        self.decoder = Decoder(cfg.encoder.embed_dim, cfg.decoder_channels, cfg.num_classes)
        if apply_policy:
            apply_freeze(self, cfg.freeze)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        h, w = image.shape[-2:]
        p = self.cfg.encoder.patch_size
        if h < p or w < p:
            raise ValueError(f"image {h}x{w} is smaller than the patch size {p}; pad it to at least {p}x{p}")
        ph, pw = padded_size(h, w, p)
        x = F.pad(image, (0, pw - w, 0, ph - h)) if (ph, pw) != (h, w) else image
        grid = self.encoder.grid_size(ph, pw)
        pre, post = self.cnn.injections(x, grid)
        tokens = self.encoder(x, pre, post)
        logits = self.decoder(tokens.permute(0, 3, 1, 2), (ph, pw))
        return logits[..., :h, :w]


def parameter_summary(model: nn.Module) -> Tuple[int, int, int]:
    """``(total, learnable, frozen)`` element counts."""
    learnable = sum(p.numel() for p in model.parameters() if p.requires_grad)
    frozen = sum(p.numel() for p in model.parameters() if not p.requires_grad)
    return learnable + frozen, learnable, frozen


def save_checkpoint(model: GSAM, path: Union[str, Path], extra: Optional[dict] = None) -> None:
    """Write config JSON, named parameters and frozen flags into one archive."""
    state = {
        "config": model.cfg.to_json(),
        "params": {n: p.detach().clone() for n, p in model.named_parameters()},
        "frozen": {n: not p.requires_grad for n, p in model.named_parameters()},
    }
    if extra:
        state["extra"] = extra
    torch.save(state, Path(path))


def load_checkpoint(path: Union[str, Path]) -> Tuple[GSAM, dict]:
    state = torch.load(Path(path), map_location="cpu", weights_only=False)
    cfg = ModelConfig.from_dict(json.loads(state["config"]))
    model = GSAM(cfg, apply_policy=False)
    dtype = next(iter(state["params"].values())).dtype
    model.to(dtype)
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(state["params"][name])
            p.requires_grad_(not state["frozen"][name])
    return model, state.get("extra", {})
