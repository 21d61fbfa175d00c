"""Finite-difference gradient checks for every layer type plus a tiny end-to-end model."""

from __future__ import annotations

from typing import Callable, Dict, List, Tuple

import torch
import torch.nn as nn

from .adapter import AdapterConfig, SMAdapter, ablation_variants
from .cnn_encoder import CnnConfig
from .image_encoder import EncoderConfig
from .layers import (Attention, Conv2d, ConvSpec, GradCheckReport, LayerNorm, LayerNorm2d, Linear,
                     grad_check)
from .model import GSAM, ModelConfig
from .peg import PEG


def randomize_(module: nn.Module, seed: int, std: float = 0.3) -> nn.Module:
    """Replace every parameter with N(0, std^2) noise (zero inits give degenerate checks)."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)
    return module


def tiny_model_config() -> ModelConfig:
    enc = EncoderConfig(patch_size=4, embed_dim=16, depth=1, num_heads=2,
                        adapter=AdapterConfig(embed_dim=16, bottleneck_dim=4))
    return ModelConfig(encoder=enc, cnn=CnnConfig(stage_channels=(4, 8, 8)), num_classes=2,
                       decoder_channels=(8, 8, 8))


def _rand(seed: int, *shape) -> torch.Tensor:
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def suite_cases() -> List[Tuple[str, Callable[[], Tuple[nn.Module, torch.Tensor, bool]]]]:
    """``(name, factory)`` pairs; factories return (module, input, check_input)."""
    cases = [
        ("conv3x3", lambda: (Conv2d(ConvSpec(2, 3, 3, padding=1)), _rand(1, 1, 2, 6, 6), True)),
        ("conv3x3_stride2", lambda: (Conv2d(ConvSpec(2, 3, 3, stride=2, padding=1)), _rand(2, 1, 2, 7, 7), True)),
        ("depthwise3x3", lambda: (Conv2d(ConvSpec.same(4, 4, 3, groups=4)), _rand(3, 1, 4, 6, 6), True)),
    ]
    for r in (12, 24, 36):
        cases.append((f"dilated_r{r}",
                      lambda r=r: (Conv2d(ConvSpec.same(2, 2, 3, dilation_rate=r)), _rand(r, 1, 2, 40, 40), True)))
    cases += [
        ("linear", lambda: (Linear(5, 4), _rand(4, 2, 3, 5), True)),
        ("layernorm", lambda: (LayerNorm(6), _rand(5, 2, 3, 6), True)),
        ("layernorm2d", lambda: (LayerNorm2d(4), _rand(6, 1, 4, 3, 3), True)),
        ("attention", lambda: (Attention(8, 2), _rand(7, 1, 3, 4, 8), True)),
        ("peg", lambda: (PEG(6), _rand(8, 1, 5, 4, 6), True)),
    ]
    # Central differences are invalid within a step of a ReLU kink, and a 40x40
    # grid has thousands of pre-activations, so the variants use a smooth
    # activation there; the default ReLU is covered on a small grid.
    base = AdapterConfig(embed_dim=8, bottleneck_dim=3, activation="gelu")
    for v in ablation_variants(base):
        cases.append((f"adapter[{v.key}]",
                      lambda cfg=v.config: (SMAdapter(cfg), _rand(9, 1, 40, 40, 8), False)))
    cases.append(("adapter_relu[full]",
                  lambda: (SMAdapter(AdapterConfig(embed_dim=8, bottleneck_dim=3)), _rand(11, 1, 6, 6, 8), False)))
    cases.append(("tiny_model", lambda: (GSAM(tiny_model_config()), _rand(10, 1, 3, 16, 16).sigmoid(), False)))
    return cases


def run_gradcheck_suite(tolerance: float = 1e-4, only: Tuple[str, ...] = ()) -> Dict[str, GradCheckReport]:
    reports = {}
    for i, (name, factory) in enumerate(suite_cases()):
        if only and not any(name.startswith(o) for o in only):
            continue
        torch.manual_seed(i)
        module, x, check_input = factory()
        module = randomize_(module.double(), seed=100 + i)
        # the end-to-end model probes a fixed random subset per tensor to stay fast
        cap = 48 if name == "tiny_model" else None
        reports[name] = grad_check(module, x, tolerance=tolerance, check_input=check_input,
                                   max_entries=cap)
    return reports
