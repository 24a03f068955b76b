"""Latent adapter and attentive fusion that steer the frozen U-Net.

The adapter maps the dequantized codec latent to one feature map per U-Net
tap. At every denoising step each tap feature ``c`` is combined with its
adapter feature ``f`` by spatial cross-attention::

    base  = c + f
    Q     = conv1x1(base),  K = conv1x1(f),  V = conv1x1(f)     # HW x C tokens
    A     = softmax(Q K^T / sqrt(C)) V                           # softmax over keys
    fused = V + FC(A)                                            # FC acts per position

and written back into the U-Net stream as ``c + proj(fused)`` with ``proj``
zero-initialized, so an untrained fusion leaves the prior untouched.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import torch
import torch.nn as nn

from .codec_core import LATENT_CHANNELS
from .diffusion_prior import predict_eps

FUSION_MODES = ("attentive", "additive")


class BottleneckResidual(nn.Module):
    def __init__(self, ch: int, reduction: int = 8):
        super().__init__()
        mid = max(ch // reduction, 4)
        self.body = nn.Sequential(
            nn.Conv2d(ch, mid, 1),
            nn.SiLU(),
            nn.Conv2d(mid, mid, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(mid, ch, 1),
        )

    def forward(self, x):
        return x + self.body(x)


class AdapterBranch(nn.Module):
    """Resampling convolution to the tap resolution, then two residual blocks."""

    def __init__(self, cin: int, cout: int, factor: int):
        super().__init__()
        if factor < 1 or factor & (factor - 1):
            raise ValueError(f"resampling factor must be a power of two, got {factor}")
        pool = nn.AvgPool2d(factor // 2) if factor > 2 else nn.Identity()
        stride = 2 if factor >= 2 else 1
        self.resample = nn.Sequential(pool, nn.Conv2d(cin, cout, 3, stride=stride, padding=1))
        self.res1 = BottleneckResidual(cout)
        self.res2 = BottleneckResidual(cout)

    def forward(self, y):
        return self.res2(self.res1(self.resample(y)))


class LatentAdapter(nn.Module):
    """Maps ``y_hat`` (``[N, C_y, h, w]``) to a list of per-tap feature maps."""

    def __init__(self, tap_shapes: Sequence[tuple[int, int, int]], latent_channels: int = LATENT_CHANNELS,
                 latent_hw: int = 16):
        super().__init__()
        self.tap_shapes = [tuple(s) for s in tap_shapes]
        self.latent_channels = latent_channels
        self.latent_hw = latent_hw
        self.branches = nn.ModuleList(
            AdapterBranch(latent_channels, c, latent_hw // h) for c, h, _ in self.tap_shapes
        )

    def forward(self, y_hat: torch.Tensor) -> list[torch.Tensor]:
        if y_hat.dim() != 4 or y_hat.shape[1] != self.latent_channels:
            raise ValueError(f"expected [N, {self.latent_channels}, h, w] latent, got {tuple(y_hat.shape)}")
        return [branch(y_hat) for branch in self.branches]


def to_tokens(x: torch.Tensor) -> torch.Tensor:
    """``[N, C, H, W] -> [N, HW, C]``."""
    return x.flatten(2).transpose(1, 2)


def from_tokens(x: torch.Tensor, height: int, width: int) -> torch.Tensor:
    return x.transpose(1, 2).reshape(x.shape[0], x.shape[2], height, width)


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, return_weights: bool = False):
    """Scaled dot-product attention on ``[N, HW, C]`` tokens, softmax over keys."""
    weights = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(q.shape[-1]), dim=-1)
    out = weights @ v
    return (out, weights) if return_weights else out


class AttentiveFusion(nn.Module):
    """Fusion and injection for a single U-Net tap with ``channels`` channels."""

    def __init__(self, channels: int, mode: str = "attentive"):
        super().__init__()
        if mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {mode!r}")
        self.mode = mode
        self.channels = channels
        if mode == "attentive":
            self.q = nn.Conv2d(channels, channels, 1)
            self.k = nn.Conv2d(channels, channels, 1)
            self.v = nn.Conv2d(channels, channels, 1)
            self.fc = nn.Linear(channels, channels)
            self.proj = nn.Conv2d(channels, channels, 1)
            nn.init.zeros_(self.proj.weight)
            nn.init.zeros_(self.proj.bias)

    def fuse(self, c: torch.Tensor, f: torch.Tensor, return_weights: bool = False):
        if c.shape != f.shape:
            raise ValueError(f"tap feature {tuple(c.shape)} and adapter feature {tuple(f.shape)} differ")
        if self.mode == "additive":
            return c + f
        h, w = c.shape[-2:]
        base = c + f
        q, k, v = to_tokens(self.q(base)), to_tokens(self.k(f)), to_tokens(self.v(f))
        attn, weights = attention(q, k, v, return_weights=True)
        out = from_tokens(v + self.fc(attn), h, w)
        return (out, weights) if return_weights else out

    def inject(self, c: torch.Tensor, fused: torch.Tensor) -> torch.Tensor:
        if self.mode == "additive":
            return fused
        return c + self.proj(fused)

    def forward(self, c, f):
        return self.inject(c, self.fuse(c, f))


class FusionStack(nn.Module):
    """One :class:`AttentiveFusion` per U-Net tap."""

    def __init__(self, tap_shapes: Sequence[tuple[int, int, int]], mode: str = "attentive"):
        super().__init__()
        self.mode = mode
        self.sites = nn.ModuleList(AttentiveFusion(c, mode) for c, _, _ in tap_shapes)

    def hook(self, control: Sequence[torch.Tensor], sites: Optional[Sequence[int]] = None):
        active = set(range(len(self.sites))) if sites is None else set(sites)

        def apply(i: int, h: torch.Tensor) -> torch.Tensor:
            if i not in active:
                return h
            f = control[i]
            if f.shape[0] != h.shape[0]:
                f = f.expand(h.shape[0], *f.shape[1:])
            return self.sites[i](h, f)

        return apply


class ConditionedDenoiser(nn.Module):
    """Adapter + fusion bundled with a reference to the frozen U-Net.

    Only the adapter and fusion parameters belong to this module's state; the
    U-Net is held outside the module tree so checkpoints stay separate.
    """

    def __init__(self, tap_shapes, mode: str = "attentive", latent_channels: int = LATENT_CHANNELS,
                 latent_hw: int = 16):
        super().__init__()
        self.adapter = LatentAdapter(tap_shapes, latent_channels, latent_hw)
        self.fusion = FusionStack(tap_shapes, mode)
        self.config = {"tap_shapes": [list(s) for s in tap_shapes], "mode": mode,
                       "latent_channels": latent_channels, "latent_hw": latent_hw}

    @property
    def mode(self) -> str:
        return self.fusion.mode

    def adapt(self, y_hat: torch.Tensor) -> list[torch.Tensor]:
        return self.adapter(y_hat)

    def eps(self, unet, z_t, t, control, sites=None):
        return predict_eps(unet, z_t, t, control, self.fusion, sites)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def zero_control(tap_shapes, batch: int = 1, dtype=torch.float32) -> list[torch.Tensor]:
    return [torch.zeros(batch, *s, dtype=dtype) for s in tap_shapes]
