"""Toy latent diffusion prior: latent autoencoder, epsilon U-Net, DDIM sampler."""

from __future__ import annotations

import math
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .codec_core import ResidualBlock, ResidualDown, ResidualUp, check_image

LATENT_DIM = 4
NUM_TIMESTEPS = 1000

SiteHook = Callable[[int, torch.Tensor], torch.Tensor]


class NoiseSchedule:
    """Linear beta schedule; timesteps are 1-based, ``t in [1, T]``."""

    def __init__(self, num_timesteps: int = NUM_TIMESTEPS, beta_start: float = 1e-4,
                 beta_end: float = 0.02):
        self.T = num_timesteps
        self.betas = np.linspace(beta_start, beta_end, num_timesteps, dtype=np.float64)
        self.alphas_cumprod = np.cumprod(1.0 - self.betas)

    def alpha_bar(self, t) -> np.ndarray:
        """``alpha_bar_t`` with ``alpha_bar_0 = 1``."""
        t = np.asarray(t)
        padded = np.concatenate([[1.0], self.alphas_cumprod])
        return padded[t]

    def check(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep outside [1, {self.T}]: {t}")


def forward_noise(schedule: NoiseSchedule, z0: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
    """``z_t = sqrt(a_t) z0 + sqrt(1 - a_t) eps`` for scalar or per-sample ``t``."""
    if eps.shape != z0.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != latent shape {tuple(z0.shape)}")
    schedule.check(t)
    a = torch.as_tensor(schedule.alpha_bar(t), dtype=z0.dtype)
    if a.dim() == 1:
        a = a.view(-1, *([1] * (z0.dim() - 1)))
    return a.sqrt() * z0 + (1 - a).sqrt() * eps


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None]
    return torch.cat([args.cos(), args.sin()], dim=1).float()


class TimeResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb, cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class UNet(nn.Module):
    """Three-resolution epsilon predictor with six feature taps.

    Taps sit after each of the three down blocks and each of the three up
    blocks. A ``hook(site, h)`` callable may rewrite the stream at a tap; the
    rewritten feature also feeds the corresponding skip connection.
    """

    NUM_SITES = 6

    def __init__(self, widths=(64, 128, 128), in_ch: int = LATENT_DIM, temb: int = 256):
        super().__init__()
        w0, w1, w2 = widths
        self.widths = tuple(widths)
        self.temb_dim = widths[0]
        self.time_mlp = nn.Sequential(nn.Linear(w0, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.conv_in = nn.Conv2d(in_ch, w0, 3, padding=1)
        self.down = nn.ModuleList([
            TimeResBlock(w0, w0, temb), TimeResBlock(w0, w1, temb), TimeResBlock(w1, w2, temb),
        ])
        self.downsample = nn.ModuleList([
            nn.Conv2d(w0, w0, 3, stride=2, padding=1), nn.Conv2d(w1, w1, 3, stride=2, padding=1),
        ])
        self.mid = TimeResBlock(w2, w2, temb)
        self.up = nn.ModuleList([
            TimeResBlock(w2 + w2, w2, temb), TimeResBlock(w2 + w1, w1, temb), TimeResBlock(w1 + w0, w0, temb),
        ])
        self.upsample = nn.ModuleList([
            nn.Conv2d(w2, w2, 3, padding=1), nn.Conv2d(w1, w1, 3, padding=1),
        ])
        self.norm_out = nn.GroupNorm(8, w0)
        self.conv_out = nn.Conv2d(w0, in_ch, 3, padding=1)

    def tap_shapes(self, height: int = 8, width: int = 8) -> list[tuple[int, int, int]]:
        w0, w1, w2 = self.widths
        return [
            (w0, height, width), (w1, height // 2, width // 2), (w2, height // 4, width // 4),
            (w2, height // 4, width // 4), (w1, height // 2, width // 2), (w0, height, width),
        ]

    def forward(self, z: torch.Tensor, t, hook: Optional[SiteHook] = None,
                taps: Optional[list] = None) -> torch.Tensor:
        t = torch.as_tensor(t).reshape(-1).expand(z.shape[0])
        emb = self.time_mlp(timestep_embedding(t, self.temb_dim).to(z.dtype))

        def site(i, h):
            if hook is not None:
                h = hook(i, h)
            if taps is not None:
                taps.append(h)
            return h

        h = self.conv_in(z)
        skips = []
        for i, block in enumerate(self.down):
            h = site(i, block(h, emb))
            skips.append(h)
            if i < 2:
                h = self.downsample[i](h)
        h = self.mid(h, emb)
        for i, block in enumerate(self.up):
            h = site(3 + i, block(torch.cat([h, skips[2 - i]], dim=1), emb))
            if i < 2:
                h = self.upsample[i](F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.conv_out(F.silu(self.norm_out(h)))


class LatentAutoencoder(nn.Module):
    """64x64x3 image <-> 4x8x8 latent (x8 spatial reduction).

    ``latent_scale`` standardizes latents to roughly unit variance; it is set
    once after autoencoder training and saved with the weights.
    """

    def __init__(self, width: int = 48, latent: int = LATENT_DIM):
        super().__init__()
        self.enc = nn.Sequential(
            ResidualDown(3, width // 2),
            ResidualDown(width // 2, width),
            ResidualBlock(width),
            ResidualDown(width, width),
            ResidualBlock(width),
            nn.Conv2d(width, latent, 3, padding=1),
        )
        self.dec = nn.Sequential(
            nn.Conv2d(latent, width, 3, padding=1),
            ResidualBlock(width),
            ResidualUp(width, width),
            ResidualBlock(width),
            ResidualUp(width, width // 2),
            ResidualUp(width // 2, 3),
        )
        self.register_buffer("latent_scale", torch.ones(()))

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.enc(x) * self.latent_scale

    def decode(self, z: torch.Tensor, clamp: bool = True) -> torch.Tensor:
        out = self.dec(z / self.latent_scale) + 0.5
        return out.clamp(0, 1) if clamp else out

    @torch.no_grad()
    def autoencode(self, x: torch.Tensor):
        check_image(x, multiple=8)
        single = x.dim() == 3
        batch = x.unsqueeze(0) if single else x
        z = self.encode(batch)
        rec = self.decode(z)
        return (z[0], rec[0]) if single else (z, rec)


class DiffusionPrior(nn.Module):
    """Frozen generative prior: autoencoder, U-Net and schedule constants."""

    def __init__(self, ae_width: int = 48, unet_widths=(64, 128, 128), num_timesteps: int = NUM_TIMESTEPS):
        super().__init__()
        self.autoencoder = LatentAutoencoder(ae_width)
        self.unet = UNet(unet_widths)
        schedule = NoiseSchedule(num_timesteps)
        self.register_buffer("betas", torch.from_numpy(schedule.betas))
        self.config = {"ae_width": ae_width, "unet_widths": list(unet_widths),
                       "num_timesteps": num_timesteps}

    @property
    def schedule(self) -> NoiseSchedule:
        s = NoiseSchedule(len(self.betas))
        s.betas = self.betas.double().numpy().copy()
        s.alphas_cumprod = np.cumprod(1.0 - s.betas)
        return s

    def latent_shape(self, height: int, width: int) -> tuple[int, int, int]:
        return (LATENT_DIM, height // 8, width // 8)


def derive_seed(global_seed: int, index: int) -> int:
    """64-bit per-image seed expanded from ``(global_seed, index)``."""
    ss = np.random.SeedSequence([int(global_seed) & (2**64 - 1), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def initial_noise(seed: int, shape, dtype=torch.float32) -> torch.Tensor:
    """Counter-based (Philox) Gaussian draw; independent of global RNG state."""
    gen = np.random.Generator(np.random.Philox(key=int(seed) & (2**64 - 1)))
    return torch.from_numpy(gen.standard_normal(shape)).to(dtype)


def ddim_timesteps(steps: int, num_timesteps: int = NUM_TIMESTEPS) -> np.ndarray:
    """Descending, uniformly spaced grid from ``T`` down to 1."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps == 1:
        return np.array([num_timesteps])
    return np.unique(np.round(np.linspace(1, num_timesteps, steps)).astype(int))[::-1].copy()


EpsFn = Callable[[torch.Tensor, int], torch.Tensor]


@torch.no_grad()
def ddim_sample(
    eps_fn: EpsFn,
    schedule: NoiseSchedule,
    shape,
    seed: int,
    steps: int = 10,
    clip: Optional[float] = 6.0,
    z_init: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM sampling.

    ``eps_fn(z_t, t)`` returns the noise estimate for a batch ``z_t``; the
    initial latent is drawn from ``seed`` unless ``z_init`` is given.
    """
    z = initial_noise(seed, shape) if z_init is None else z_init.clone()
    ts = ddim_timesteps(steps, schedule.T)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        a_t = float(schedule.alpha_bar(t))
        a_prev = float(schedule.alpha_bar(t_prev))
        eps = eps_fn(z, int(t))
        x0 = (z - math.sqrt(1 - a_t) * eps) / math.sqrt(a_t)
        if clip is not None:
            x0 = x0.clamp(-clip, clip)
            eps = (z - math.sqrt(a_t) * x0) / math.sqrt(1 - a_t)
        z = math.sqrt(a_prev) * x0 + math.sqrt(1 - a_prev) * eps
    return z


def predict_eps(unet: UNet, z_t: torch.Tensor, t, control=None, fusion=None, sites=None) -> torch.Tensor:
    """Noise estimate, optionally steered by adapter features through ``fusion``.

    ``control`` is a list with one feature map per U-Net tap. ``sites``
    restricts injection to a subset of tap indices.
    """
    if control is None:
        return unet(z_t, t)
    if fusion is None:
        raise ValueError("control features given without a fusion module")
    expected = unet.tap_shapes(*z_t.shape[-2:])
    if len(control) != len(expected):
        raise ValueError(f"expected {len(expected)} control features, got {len(control)}")
    for i, (f, shape) in enumerate(zip(control, expected)):
        if tuple(f.shape[-3:]) != shape or f.shape[0] != z_t.shape[0]:
            raise ValueError(f"control feature {i} has shape {tuple(f.shape)}, expected (N, *{shape})")
    return unet(z_t, t, hook=fusion.hook(control, sites))
