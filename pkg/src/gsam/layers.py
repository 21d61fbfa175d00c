"""Primitive layers with multiply-accumulate accounting and a gradient checker.

Every layer keeps ``last_macs``, the exact multiply-accumulate count of its
most recent forward call, and exposes ``macs_for`` to compute the same number
from shapes alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F


class ConfigurationError(ValueError):
    """Shapes or hyperparameters do not fit together."""


class NumericError(ArithmeticError):
    """A tensor contains NaN or Inf where finite values are required."""


def _check_finite(t: torch.Tensor, what: str) -> None:
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite values in {what}")


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    dilation_rate: int = 1
    groups: int = 1
    padding: int = 0

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel", "stride", "dilation_rate", "groups"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.padding < 0:
            raise ConfigurationError("padding must be non-negative")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConfigurationError(
                f"channels ({self.in_channels}, {self.out_channels}) not divisible by groups={self.groups}"
            )

    @classmethod
    def same(cls, in_channels: int, out_channels: int, kernel: int = 3,
             dilation_rate: int = 1, groups: int = 1) -> "ConvSpec":
        """Stride-1 spec whose padding keeps spatial dims unchanged (odd kernels)."""
        if kernel % 2 == 0:
            raise ConfigurationError("'same' padding needs an odd kernel")
        return cls(in_channels, out_channels, kernel, 1, dilation_rate, groups,
                   dilation_rate * (kernel - 1) // 2)

    @property
    def effective_kernel(self) -> int:
        return self.kernel + (self.kernel - 1) * (self.dilation_rate - 1)

    def output_size(self, h: int, w: int) -> Tuple[int, int]:
        ek = self.effective_kernel
        ho = (h + 2 * self.padding - ek) // self.stride + 1
        wo = (w + 2 * self.padding - ek) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ConfigurationError(f"input {h}x{w} too small for effective kernel {ek}")
        return ho, wo

    def weight_shape(self) -> Tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, self.kernel, self.kernel)

    def macs(self, h: int, w: int) -> int:
        ho, wo = self.output_size(h, w)
        return self.out_channels * (self.in_channels // self.groups) * self.kernel ** 2 * ho * wo


def conv2d_forward(x: torch.Tensor, spec: ConvSpec, weight: torch.Tensor,
                   bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Dilated cross-correlation ``y[i] = sum_k x[i + r*k] w[k] + b`` over ``[B, C, H, W]``."""
    if x.dim() != 4:
        raise ConfigurationError(f"expected [B, C, H, W], got shape {tuple(x.shape)}")
    if x.shape[1] != spec.in_channels:
        raise ConfigurationError(f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    if tuple(weight.shape) != spec.weight_shape():
        raise ConfigurationError(f"weight shape {tuple(weight.shape)} != {spec.weight_shape()}")
    spec.output_size(x.shape[2], x.shape[3])
    _check_finite(x, "conv2d input")
    return F.conv2d(x, weight, bias, stride=spec.stride, padding=spec.padding,
                    dilation=spec.dilation_rate, groups=spec.groups)


class Conv2d(nn.Module):
    def __init__(self, spec: ConvSpec, bias: bool = True):
        super().__init__()
        self.spec = spec
        self.weight = nn.Parameter(torch.empty(spec.weight_shape()))
        self.bias = nn.Parameter(torch.zeros(spec.out_channels)) if bias else None
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        self.last_macs = 0

    def macs_for(self, shape: Sequence[int]) -> int:
        return shape[0] * self.spec.macs(shape[2], shape[3])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = conv2d_forward(x, self.spec, self.weight, self.bias)
        self.last_macs = self.macs_for(x.shape)
        return y

    def extra_repr(self) -> str:
        s = self.spec
        return (f"{s.in_channels}, {s.out_channels}, k={s.kernel}, stride={s.stride}, "
                f"r={s.dilation_rate}, groups={s.groups}, pad={s.padding}")


class Linear(nn.Module):
    """Affine map over the last dimension."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = nn.Parameter(torch.empty(out_features, in_features))
        self.bias = nn.Parameter(torch.zeros(out_features)) if bias else None
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        if self.bias is not None:
            bound = 1 / math.sqrt(in_features)
            nn.init.uniform_(self.bias, -bound, bound)
        self.last_macs = 0

    def macs_for(self, shape: Sequence[int]) -> int:
        return math.prod(shape[:-1]) * self.in_features * self.out_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_features:
            raise ConfigurationError(f"last dim {x.shape[-1]} != in_features {self.in_features}")
        self.last_macs = self.macs_for(x.shape)
        return F.linear(x, self.weight, self.bias)

    def extra_repr(self) -> str:
        return f"{self.in_features}, {self.out_features}"


class LayerNorm(nn.Module):
    """Normalizes the last dimension. Counted as zero MACs."""

    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))
        self.eps = eps
        self.last_macs = 0

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.layer_norm(x, x.shape[-1:], self.weight, self.bias, self.eps)


class LayerNorm2d(LayerNorm):
    """Channel-wise layer norm for ``[B, C, H, W]`` maps."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        u = x.mean(1, keepdim=True)
        s = (x - u).pow(2).mean(1, keepdim=True)
        x = (x - u) / torch.sqrt(s + self.eps)
        return self.weight[:, None, None] * x + self.bias[:, None, None]


def attention_forward(tokens: torch.Tensor, qkv_weight: torch.Tensor, qkv_bias: Optional[torch.Tensor],
                      proj_weight: torch.Tensor, proj_bias: Optional[torch.Tensor], num_heads: int,
                      return_probs: bool = False):
    """Global multi-head self-attention over a ``[B, Ht, Wt, C]`` token grid.

    Returns the output grid, and the ``[B, heads, N, N]`` softmax matrix when
    ``return_probs`` is set.
    """
    b, h, w, c = tokens.shape
    if c % num_heads:
        raise ConfigurationError(f"embed_dim {c} not divisible by num_heads {num_heads}")
    hd = c // num_heads
    n = h * w
    qkv = F.linear(tokens.reshape(b, n, c), qkv_weight, qkv_bias)
    qkv = qkv.reshape(b, n, 3, num_heads, hd).permute(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    probs = torch.softmax((q * hd ** -0.5) @ k.transpose(-2, -1), dim=-1)
    out = (probs @ v).transpose(1, 2).reshape(b, n, c)
    out = F.linear(out, proj_weight, proj_bias).reshape(b, h, w, c)
    return (out, probs) if return_probs else out


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ConfigurationError(f"embed_dim {dim} not divisible by num_heads {num_heads}")
        self.dim = dim
        self.num_heads = num_heads
        self.qkv = Linear(dim, 3 * dim)
        self.proj = Linear(dim, dim)
        self.last_macs = 0

    @staticmethod
    def score_macs(n_tokens: int, dim: int) -> int:
        """MACs of ``q @ k^T`` (the weighted sum ``probs @ v`` costs the same)."""
        return n_tokens * n_tokens * dim

    def macs_for(self, shape: Sequence[int]) -> int:
        b, h, w, c = shape
        n = h * w
        return b * (3 * n * c * c + 2 * self.score_macs(n, c) + n * c * c)

    def forward(self, x: torch.Tensor, return_probs: bool = False):
        out = attention_forward(x, self.qkv.weight, self.qkv.bias, self.proj.weight,
                                self.proj.bias, self.num_heads, return_probs)
        # qkv/proj are applied functionally; the whole cost is booked here
        self.last_macs = self.macs_for(x.shape)
        return out


def total_forward_macs(module: nn.Module) -> int:
    """Sum of ``last_macs`` over leaf cost carriers after a forward call.

    ``Attention`` books its own projections, so its ``Linear`` children are
    skipped.
    """
    total = 0
    skip = set()
    for m in module.modules():
        if isinstance(m, Attention):
            skip.update(id(c) for c in m.modules() if c is not m)
    for m in module.modules():
        if id(m) in skip:
            continue
        if isinstance(m, (Conv2d, Linear, Attention)):
            total += m.last_macs
    return total


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_parameter_errors: Dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _default_step(dtype: torch.dtype) -> float:
    return 1e-5 if dtype == torch.float64 else 1e-3


def _rel_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    diff = (analytic - numeric).norm().item()
    scale = max(analytic.norm().item(), numeric.norm().item())
    if scale < 1e-12:
        return diff
    return diff / scale


def grad_check(module: nn.Module, inputs, tolerance: float = 1e-4, step: Optional[float] = None,
               check_input: bool = False,
               loss_fn: Optional[Callable[[torch.Tensor], torch.Tensor]] = None,
               max_entries: Optional[int] = None, seed: int = 0) -> GradCheckReport:
    """Compare autograd gradients with central finite differences.

    The scalar loss is the sum of the module's outputs unless ``loss_fn`` is
    given. Frozen parameters (``requires_grad=False``) are left out of the
    report. ``max_entries`` caps how many entries per tensor are probed; the
    probed subset is drawn with ``seed``.
    """
    if not isinstance(inputs, (tuple, list)):
        inputs = (inputs,)
    loss_fn = loss_fn or (lambda out: out.sum())
    inputs = [t.detach().clone() for t in inputs]
    dtype = inputs[0].dtype
    h = step if step is not None else _default_step(dtype)

    targets: Dict[str, torch.Tensor] = {
        name: p for name, p in module.named_parameters() if p.requires_grad
    }
    if check_input:
        inputs[0].requires_grad_(True)
        targets["input"] = inputs[0]

    module.zero_grad(set_to_none=True)
    loss = loss_fn(module(*inputs))
    if not torch.isfinite(loss):
        raise NumericError("loss is not finite")
    loss.backward()

    gen = torch.Generator().manual_seed(seed)
    errors: Dict[str, float] = {}
    with torch.no_grad():
        for name, t in targets.items():
            grad = t.grad
            analytic = torch.zeros_like(t) if grad is None else grad.detach().clone()
            if not torch.isfinite(analytic).all():
                raise NumericError(f"non-finite analytic gradient for {name}")
            flat = t.view(-1)
            idx = torch.arange(flat.numel())
            if max_entries is not None and flat.numel() > max_entries:
                idx = torch.randperm(flat.numel(), generator=gen)[:max_entries]
            numeric = torch.empty(len(idx), dtype=t.dtype)
            for j, i in enumerate(idx.tolist()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn(module(*inputs)).item()
                flat[i] = orig - h
                down = loss_fn(module(*inputs)).item()
                flat[i] = orig
                numeric[j] = (up - down) / (2 * h)
            if not torch.isfinite(numeric).all():
                raise NumericError(f"non-finite numeric gradient for {name}")
            errors[name] = _rel_error(analytic.view(-1)[idx], numeric)
    module.zero_grad(set_to_none=True)
    return GradCheckReport(max(errors.values(), default=0.0), errors, tolerance)
