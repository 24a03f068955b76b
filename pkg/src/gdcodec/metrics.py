"""Image distortion metrics: MS-SSIM and a deterministic LPIPS stand-in."""

from __future__ import annotations

from typing import Callable

import torch
import torch.nn.functional as F

# standard five-scale exponents; shorter pyramids use a renormalized prefix
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_C1 = 0.01**2
_C2 = 0.03**2

PerceptualMetric = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def _gaussian_window(size: int, sigma: float, dtype, device) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    return g / g.sum()


def _blur(x: torch.Tensor, win: torch.Tensor) -> torch.Tensor:
    c = x.shape[1]
    k = win.numel()
    x = F.conv2d(x, win.view(1, 1, 1, k).expand(c, 1, 1, k), groups=c)
    return F.conv2d(x, win.view(1, 1, k, 1).expand(c, 1, k, 1), groups=c)


def _ssim_terms(a: torch.Tensor, b: torch.Tensor, win: torch.Tensor):
    mu_a = _blur(a, win)
    mu_b = _blur(b, win)
    mu_aa, mu_bb, mu_ab = mu_a * mu_a, mu_b * mu_b, mu_a * mu_b
    var_a = _blur(a * a, win) - mu_aa
    var_b = _blur(b * b, win) - mu_bb
    cov = _blur(a * b, win) - mu_ab
    cs = (2 * cov + _C2) / (var_a + var_b + _C2)
    lum = (2 * mu_ab + _C1) / (mu_aa + mu_bb + _C1)
    return lum * cs, cs


def default_scales(height: int, width: int, max_scales: int = 3) -> int:
    side = min(height, width)
    scales = 0
    while scales < max_scales and side >= 16 * 2**scales:
        scales += 1
    return scales


def ms_ssim(
    a: torch.Tensor,
    b: torch.Tensor,
    scales: int | None = None,
    win_size: int = 11,
    win_sigma: float = 1.5,
) -> torch.Tensor:
    """Multi-scale SSIM for images in ``[0, 1]``.

    Accepts ``(C, H, W)`` or ``(N, C, H, W)`` tensors and returns a scalar or
    a per-image vector. Contrast-structure terms are taken at every scale but
    the coarsest, where the full SSIM (luminance included) is used.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    single = a.dim() == 3
    if single:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    h, w = a.shape[-2:]
    if scales is None:
        scales = default_scales(h, w)
    if scales < 1 or min(h, w) < 16 * 2 ** (scales - 1):
        raise ValueError(f"{h}x{w} image too small for {max(scales, 1)}-scale MS-SSIM")
    weights = torch.tensor(MS_SSIM_WEIGHTS[:scales], dtype=a.dtype, device=a.device)
    weights = weights / weights.sum()
    win = _gaussian_window(win_size, win_sigma, a.dtype, a.device)

    factors = []
    for j in range(scales):
        ssim_map, cs_map = _ssim_terms(a, b, win)
        term = ssim_map if j == scales - 1 else cs_map
        factors.append(term.flatten(1).mean(dim=1).clamp_min(1e-8))
        if j < scales - 1:
            a = F.avg_pool2d(a, 2)
            b = F.avg_pool2d(b, 2)
    out = torch.prod(torch.stack(factors, dim=1) ** weights, dim=1)
    return out[0] if single else out


class LpipsProxy(torch.nn.Module):
    """Feature-space distance from a frozen random convolution stack.

    Three conv+ReLU layers with fixed seeded weights; activations are
    unit-normalized across channels and compared by squared L2 distance,
    averaged over positions and then over layers.
    """

    def __init__(self, seed: int = 0, widths=(16, 32, 64)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        cin = 3
        for i, cout in enumerate(widths):
            conv = torch.nn.Conv2d(cin, cout, 3, stride=1 if i == 0 else 2, padding=1)
            bound = (6 / (cin * 9)) ** 0.5
            with torch.no_grad():
                conv.weight.copy_(torch.rand(conv.weight.shape, generator=gen) * 2 * bound - bound)
                conv.bias.copy_(torch.rand(conv.bias.shape, generator=gen) * 0.2 - 0.1)
            layers.append(conv)
            cin = cout
        self.layers = torch.nn.ModuleList(layers)
        self.requires_grad_(False)

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        h = 2 * x - 1
        feats = []
        for conv in self.layers:
            h = F.relu(conv(h))
            feats.append(h / (h.norm(dim=1, keepdim=True) + 1e-10))
        return feats

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
        single = a.dim() == 3
        if single:
            a, b = a.unsqueeze(0), b.unsqueeze(0)
        dists = []
        for fa, fb in zip(self.features(a), self.features(b)):
            dists.append(((fa - fb) ** 2).sum(dim=1).flatten(1).mean(dim=1))
        out = torch.stack(dists, dim=1).mean(dim=1)
        return out[0] if single else out


_PROXY: LpipsProxy | None = None


def lpips_proxy(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Module-level convenience wrapper around a shared :class:`LpipsProxy`."""
    global _PROXY
    if _PROXY is None:
        _PROXY = LpipsProxy()
    proxy = _PROXY.to(dtype=a.dtype)
    with torch.no_grad():
        return proxy(a, b)
