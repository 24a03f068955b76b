"""Variable-rate learned image encoder with a mean-scale hyperprior.

The encoder produces a latent at 1/4 resolution; per-rate-level gain vectors
scale it channel-wise before rounding, so a single set of weights serves all
rate levels. A hyper-encoder summarizes the scaled latent at 1/16 resolution
and the hyper-decoder predicts the mean and scale of a discretized Gaussian
for every main-latent symbol.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .entropy_coding import SCALE_MIN, SYMBOL_HI, SYMBOL_LO, TOTAL
from .metrics import ms_ssim

NUM_RATE_LEVELS = 10
# paper multipliers scaled by 1/10 for the toy corpus; index 0 is the highest rate
PAPER_LAMBDAS = (50.0, 16.0, 3.0, 1.0, 0.5, 0.25, 0.1, 0.05, 0.01, 0.005)
TOY_LAMBDAS = tuple(lam / 10 for lam in PAPER_LAMBDAS)

LATENT_CHANNELS = 32
HYPER_CHANNELS = 16
NUM_SYMBOLS = SYMBOL_HI - SYMBOL_LO + 1


class LatentRangeError(ValueError):
    """Scaled latent falls outside the entropy coder's symbol range."""


@dataclass
class CompressedLatent:
    y_q: np.ndarray  # int [C_y, H/4, W/4]
    z_q: np.ndarray  # int [C_z, H/16, W/16]
    rate_level: int

    def __post_init__(self):
        if not 0 <= self.rate_level < NUM_RATE_LEVELS:
            raise ValueError(f"rate level {self.rate_level} outside [0, {NUM_RATE_LEVELS - 1}]")


def check_image(x: torch.Tensor, multiple: int = 16) -> None:
    if x.dim() not in (3, 4) or x.shape[-3] != 3:
        raise ValueError(f"expected a 3-channel image tensor, got shape {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if h % multiple or w % multiple or h == 0 or w == 0:
        raise ValueError(f"image size {h}x{w} must be a positive multiple of {multiple}")
    if not torch.isfinite(x).all():
        raise ValueError("image contains non-finite values")


def conv(cin, cout, k=3, stride=1):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2)


class ResidualBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv1 = conv(ch, ch)
        self.conv2 = conv(ch, ch)

    def forward(self, x):
        h = F.leaky_relu(self.conv1(x), 0.1)
        return x + self.conv2(h)


class ResidualDown(nn.Module):
    """Stride-2 residual stage: two convs on the main path, 1x1 strided skip."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = conv(cin, cout, stride=2)
        self.conv2 = conv(cout, cout)
        self.skip = nn.Conv2d(cin, cout, 1, stride=2)

    def forward(self, x):
        h = F.leaky_relu(self.conv1(x), 0.1)
        return self.skip(x) + self.conv2(h)


class ResidualUp(nn.Module):
    """Sub-pixel x2 upsampling stage mirroring :class:`ResidualDown`."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.up = nn.Sequential(conv(cin, cout * 4), nn.PixelShuffle(2))
        self.conv2 = conv(cout, cout)
        self.skip = nn.Sequential(nn.Conv2d(cin, cout * 4, 1), nn.PixelShuffle(2))

    def forward(self, x):
        h = F.leaky_relu(self.up(x), 0.1)
        return self.skip(x) + self.conv2(h)


class Encoder(nn.Sequential):
    def __init__(self, width: int = 48, latent: int = LATENT_CHANNELS):
        super().__init__(
            ResidualDown(3, width),
            ResidualBlock(width),
            ResidualDown(width, latent),
            ResidualBlock(latent),
        )


class AuxDecoder(nn.Sequential):
    """Pixel decoder used only while optimizing the pretext task."""

    def __init__(self, width: int = 48, latent: int = LATENT_CHANNELS):
        super().__init__(
            ResidualBlock(latent),
            ResidualUp(latent, width),
            ResidualBlock(width),
            ResidualUp(width, 3),
        )

    def forward(self, y_hat):
        return super().forward(y_hat) + 0.5


class HyperEncoder(nn.Sequential):
    def __init__(self, width: int = 48, latent: int = LATENT_CHANNELS, hyper: int = HYPER_CHANNELS):
        super().__init__(
            conv(latent, width),
            nn.LeakyReLU(0.1),
            conv(width, width, k=5, stride=2),
            nn.LeakyReLU(0.1),
            conv(width, hyper, k=5, stride=2),
        )


class HyperDecoder(nn.Module):
    def __init__(self, width: int = 48, latent: int = LATENT_CHANNELS, hyper: int = HYPER_CHANNELS):
        super().__init__()
        self.body = nn.Sequential(
            nn.ConvTranspose2d(hyper, width, 4, stride=2, padding=1),
            nn.LeakyReLU(0.1),
            nn.ConvTranspose2d(width, width, 4, stride=2, padding=1),
            nn.LeakyReLU(0.1),
            conv(width, 2 * latent),
        )

    def forward(self, z_hat):
        means, raw = self.body(z_hat).chunk(2, dim=1)
        return means, SCALE_MIN + F.softplus(raw)


class FactorizedPrior(nn.Module):
    """Per-channel learned Gaussian for the hyper-latent."""

    def __init__(self, channels: int = HYPER_CHANNELS):
        super().__init__()
        self.means = nn.Parameter(torch.zeros(channels))
        self.raw_scales = nn.Parameter(torch.full((channels,), 1.0))

    def params(self, like: torch.Tensor):
        shape = (1, -1, 1, 1)
        means = self.means.view(shape).expand_as(like)
        scales = (SCALE_MIN + F.softplus(self.raw_scales)).view(shape).expand_as(like)
        return means, scales


class GainUnits(nn.Module):
    """Learned per-level, per-channel gain and inverse gain vectors."""

    def __init__(self, levels: int = NUM_RATE_LEVELS, channels: int = LATENT_CHANNELS,
                 high: float = 4.0, low: float = 0.25):
        super().__init__()
        init = torch.linspace(np.log(high), np.log(low), levels)[:, None].repeat(1, channels)
        self.log_scale = nn.Parameter(init.clone())
        self.log_inverse_scale = nn.Parameter(-init.clone())

    @property
    def scale(self) -> torch.Tensor:
        return self.log_scale.exp()

    @property
    def inverse_scale(self) -> torch.Tensor:
        return self.log_inverse_scale.exp()

    def gain(self, s) -> torch.Tensor:
        return self.scale[s].view(-1, self.log_scale.shape[1], 1, 1)

    def inverse_gain(self, s) -> torch.Tensor:
        return self.inverse_scale[s].view(-1, self.log_scale.shape[1], 1, 1)


def gaussian_likelihood(values, means, scales, lo=SYMBOL_LO, hi=SYMBOL_HI, fold_tails=False):
    """Probability the coder assigns to ``values`` (integer or relaxed).

    Mirrors the table construction in :mod:`entropy_coding`: Gaussian mass of
    the unit bin, optional tail folding at the range ends, and the minimum
    frequency floor of one count per symbol.
    """
    scales = scales.clamp_min(SCALE_MIN)
    centered = values - means
    # evaluate on the left tail for precision
    v = centered.abs()
    upper = torch.special.ndtr((0.5 - v) / scales)
    lower = torch.special.ndtr((-0.5 - v) / scales)
    mass = upper - lower
    if fold_tails:
        at_lo = values <= lo
        at_hi = values >= hi
        mass = torch.where(at_lo, torch.special.ndtr((lo + 0.5 - means) / scales), mass)
        mass = torch.where(at_hi, torch.special.ndtr((means - hi + 0.5) / scales), mass)
    mass = mass.clamp(0.0, 1.0)
    return (1.0 + mass * (TOTAL - NUM_SYMBOLS)) / TOTAL


def bits_of(likelihood: torch.Tensor) -> torch.Tensor:
    """Per-image total bits for a batch of likelihood maps."""
    return -torch.log2(likelihood).flatten(1).sum(dim=1)


def quantize_ste(x: torch.Tensor) -> torch.Tensor:
    return x + (torch.round(x) - x).detach()


class VariableRateCodec(nn.Module):
    """Encoder, hyperprior entropy model and gain units (the retained stage-1 parameters)."""

    def __init__(self, width: int = 48, latent: int = LATENT_CHANNELS, hyper: int = HYPER_CHANNELS,
                 levels: int = NUM_RATE_LEVELS):
        super().__init__()
        self.encoder = Encoder(width, latent)
        self.hyper_encoder = HyperEncoder(width, latent, hyper)
        self.hyper_decoder = HyperDecoder(width, latent, hyper)
        self.z_prior = FactorizedPrior(hyper)
        self.gains = GainUnits(levels, latent)
        self.config = {"width": width, "latent": latent, "hyper": hyper, "levels": levels}

    @property
    def levels(self) -> int:
        return self.gains.log_scale.shape[0]

    def analysis(self, x: torch.Tensor, s) -> torch.Tensor:
        """Scaled, unquantized latent ``E(x) * scale[s]``."""
        return self.encoder(x) * self.gains.gain(s)

    def forward_relaxed(self, x, s, quantizer: str = "mixed", noise=None):
        """Training-time pass.

        ``quantizer="mixed"`` uses additive uniform noise for the rate terms and
        straight-through rounding for the reconstruction path. ``"noise"`` uses
        the noisy latents everywhere, which keeps the graph differentiable for
        finite-difference checks. ``noise`` optionally supplies the
        ``(y_noise, z_noise)`` pair.
        """
        ys = self.analysis(x, s)
        z = self.hyper_encoder(ys)
        if noise is None:
            noise = (torch.rand_like(ys) - 0.5, torch.rand_like(z) - 0.5)
        y_noisy, z_noisy = ys + noise[0], z + noise[1]
        if quantizer == "mixed":
            y_hat, z_hat = quantize_ste(ys), quantize_ste(z)
        elif quantizer == "noise":
            y_hat, z_hat = y_noisy, z_noisy
        else:
            raise ValueError(f"unknown quantizer {quantizer!r}")
        means, scales = self.hyper_decoder(z_hat)
        y_lik = gaussian_likelihood(y_noisy, means, scales)
        z_lik = gaussian_likelihood(z_noisy, *self.z_prior.params(z_noisy))
        return y_hat, y_lik, z_lik

    @torch.no_grad()
    def encode_latent(self, x: torch.Tensor, s: int) -> CompressedLatent:
        check_image(x)
        if not 0 <= s < self.levels:
            raise ValueError(f"rate level {s} outside [0, {self.levels - 1}]")
        batch = x.unsqueeze(0) if x.dim() == 3 else x
        if batch.shape[0] != 1:
            raise ValueError("encode_latent takes a single image")
        ys = self.analysis(batch.clamp(0, 1), s)
        z_q = torch.round(self.hyper_encoder(ys))
        y_q = torch.round(ys)
        for name, q in (("main", y_q), ("hyper", z_q)):
            lo, hi = q.min().item(), q.max().item()
            if lo < SYMBOL_LO or hi > SYMBOL_HI:
                raise LatentRangeError(
                    f"{name} latent range [{lo:.0f}, {hi:.0f}] exceeds symbol range "
                    f"[{SYMBOL_LO}, {SYMBOL_HI}] at rate level {s}"
                )
        return CompressedLatent(
            y_q[0].to(torch.int64).numpy(), z_q[0].to(torch.int64).numpy(), int(s)
        )

    @torch.no_grad()
    def main_params(self, z_q: np.ndarray):
        """Mean/scale maps of the main latent given the decoded hyper-latent."""
        z = torch.as_tensor(z_q, dtype=self.z_prior.means.dtype).unsqueeze(0)
        means, scales = self.hyper_decoder(z)
        return means[0].double().numpy(), scales[0].double().numpy()

    @torch.no_grad()
    def hyper_params(self, shape):
        z = torch.zeros((1, *shape), dtype=self.z_prior.means.dtype)
        means, scales = self.z_prior.params(z)
        return means[0].double().numpy(), scales[0].double().numpy()

    @torch.no_grad()
    def estimate_rate(self, lat: CompressedLatent) -> float:
        """Model estimate of the total bits for hard-quantized symbols."""
        dtype = self.z_prior.means.dtype
        y = torch.as_tensor(lat.y_q, dtype=torch.float64).unsqueeze(0)
        z = torch.as_tensor(lat.z_q, dtype=torch.float64).unsqueeze(0)
        means, scales = self.hyper_decoder(z.to(dtype))
        y_lik = gaussian_likelihood(y, means.double(), scales.double(), fold_tails=True)
        z_means, z_scales = self.z_prior.params(z.to(dtype))
        z_lik = gaussian_likelihood(z, z_means.double(), z_scales.double(), fold_tails=True)
        return float(bits_of(y_lik)[0] + bits_of(z_lik)[0])

    def dequantize(self, y_q, s) -> torch.Tensor:
        """``y_q * inverse_scale[s]``; accepts numpy or tensor, batched or not."""
        y = torch.as_tensor(y_q, dtype=self.gains.log_scale.dtype)
        if y.dim() == 3:
            y = y.unsqueeze(0)
        return y * self.gains.inverse_gain(s)


def aux_decode(codec: VariableRateCodec, aux: AuxDecoder, lat: CompressedLatent) -> torch.Tensor:
    with torch.no_grad():
        y_hat = codec.dequantize(lat.y_q, lat.rate_level)
        return aux(y_hat)[0].clamp(0, 1)


def pretext_loss(
    codec: VariableRateCodec,
    aux: AuxDecoder,
    x: torch.Tensor,
    s,
    lambdas=TOY_LAMBDAS,
    quantizer: str = "mixed",
    noise=None,
):
    """Rate (bits per pixel) plus ``lambda_s * (1 - MS-SSIM)`` for rate level(s) ``s``.

    ``s`` may be an int or a per-image index tensor. Returns the scalar loss and
    a dict of detached batch means.
    """
    s = torch.as_tensor(s)
    lam = torch.as_tensor(lambdas, dtype=x.dtype)[s]
    y_hat, y_lik, z_lik = codec.forward_relaxed(x, s, quantizer=quantizer, noise=noise)
    x_hat = aux(y_hat * codec.gains.inverse_gain(s)).clamp(0, 1)
    pixels = x.shape[-2] * x.shape[-1]
    bpp = (bits_of(y_lik) + bits_of(z_lik)) / pixels
    quality = ms_ssim(x, x_hat)
    loss = (bpp + lam * (1 - quality)).mean()
    return loss, {"bpp": bpp.mean().item(), "ms_ssim": quality.mean().item()}
