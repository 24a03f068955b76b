"""Rate-distortion measurement, Bjontegaard deltas and ablation sweeps."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch
from scipy.interpolate import PchipInterpolator

from .diffusion_prior import derive_seed
from .fidelity_renorm import apply_renorm
from .metrics import lpips_proxy, ms_ssim
from .pipeline import GenerativeCodec

METRICS = ("ms_ssim", "lpips_proxy", "mean_error")
HIGHER_IS_BETTER = {"ms_ssim": True, "lpips_proxy": False, "mean_error": False}
VARIANTS = ("full", "no_adapter", "no_renorm", "additive")


class BdError(ValueError):
    """Curves cannot be compared (too few points or no overlap)."""


@dataclass(frozen=True)
class RdPoint:
    bpp: float
    distortion: float
    rate_level: int
    metric: str = "ms_ssim"

    def __post_init__(self):
        if not self.bpp > 0:
            raise ValueError(f"bpp must be positive, got {self.bpp}")


@dataclass
class RdCurve:
    """Points of one codec configuration, kept sorted by bpp."""

    label: str
    points: list[RdPoint] = field(default_factory=list)

    def __post_init__(self):
        # saturated rate levels can code to the same size, so equal bpp values are allowed
        self.points = sorted(self.points, key=lambda p: (p.bpp, p.rate_level))
        metrics = {p.metric for p in self.points}
        if len(metrics) > 1:
            raise ValueError(f"curve {self.label!r} mixes metrics {sorted(metrics)}")

    @classmethod
    def from_arrays(cls, label: str, bpp, distortion, metric: str = "ms_ssim", levels=None) -> "RdCurve":
        levels = range(len(bpp)) if levels is None else levels
        return cls(label, [RdPoint(float(r), float(d), int(s), metric)
                           for r, d, s in zip(bpp, distortion, levels)])

    @property
    def metric(self) -> Optional[str]:
        return self.points[0].metric if self.points else None

    @property
    def rates(self) -> np.ndarray:
        return np.array([p.bpp for p in self.points])

    @property
    def distortions(self) -> np.ndarray:
        return np.array([p.distortion for p in self.points])

    def records(self) -> list[dict]:
        return [{"label": self.label, "rate_level": p.rate_level, "bpp": p.bpp,
                 "metric": p.metric, "value": p.distortion} for p in self.points]


# Bjontegaard ----------------------------------------------------------------


def _fit_integral(x: np.ndarray, y: np.ndarray, lo: float, hi: float, piecewise: bool) -> float:
    """Integral over ``[lo, hi]`` of a fit of ``y`` as a function of ``x``."""
    order = np.argsort(x)
    x, y = x[order], y[order]
    if piecewise:
        if np.any(np.diff(x) <= 0):
            raise BdError("piecewise fit needs strictly monotone abscissae")
        return float(PchipInterpolator(x, y).integrate(lo, hi))
    poly = np.polynomial.Polynomial.fit(x, y, 3).convert()
    integral = poly.integ()
    return float(integral(hi) - integral(lo))


def _overlap(a: np.ndarray, b: np.ndarray, what: str) -> tuple[float, float]:
    lo, hi = max(a.min(), b.min()), min(a.max(), b.max())
    if not hi > lo:
        raise BdError(f"curves do not overlap in {what}")
    return lo, hi


def _check(curve: RdCurve) -> None:
    distinct = len(np.unique(curve.rates))
    if distinct < 4:
        raise BdError(f"curve {curve.label!r} has {distinct} distinct rates, need at least 4")
    d = curve.distortions
    steps = np.diff(d)
    if not (np.all(steps > 0) or np.all(steps < 0)):
        warnings.warn(f"curve {curve.label!r} is not monotone in distortion; fitting anyway", stacklevel=3)


def bd_rate(ref: RdCurve, test: RdCurve, piecewise: bool = False) -> float:
    """Average bitrate difference of ``test`` vs ``ref`` at equal distortion, in percent."""
    _check(ref)
    _check(test)
    lo, hi = _overlap(ref.distortions, test.distortions, "distortion")
    ref_int = _fit_integral(ref.distortions, np.log(ref.rates), lo, hi, piecewise)
    test_int = _fit_integral(test.distortions, np.log(test.rates), lo, hi, piecewise)
    return float((np.exp((test_int - ref_int) / (hi - lo)) - 1) * 100)


def bd_distortion(ref: RdCurve, test: RdCurve, piecewise: bool = False,
                  higher_is_better: bool = False) -> float:
    """Average distortion difference at equal rate, as a percent of the mean reference distortion.

    The metric is used as-is, so for a lower-is-better metric a negative value
    means ``test`` is better. ``higher_is_better`` flips the sign so negative
    always means better.
    """
    _check(ref)
    _check(test)
    lr, lt = np.log(ref.rates), np.log(test.rates)
    lo, hi = _overlap(lr, lt, "log-rate")
    ref_int = _fit_integral(lr, ref.distortions, lo, hi, piecewise)
    test_int = _fit_integral(lt, test.distortions, lo, hi, piecewise)
    out = (test_int - ref_int) / ref_int * 100
    return float(-out if higher_is_better else out)


def bd_metrics(ref: RdCurve, test: RdCurve, piecewise: bool = False,
               higher_is_better: Optional[bool] = None) -> tuple[float, float]:
    """``(bd_rate %, bd_distortion %)``; the sign convention defaults from the metric tag."""
    if higher_is_better is None:
        higher_is_better = HIGHER_IS_BETTER.get(ref.metric, False)
    return (bd_rate(ref, test, piecewise),
            bd_distortion(ref, test, piecewise, higher_is_better))


# sweeps ---------------------------------------------------------------------


def mean_channel_error(a, b) -> np.ndarray:
    """``mean_c |mean(a_c) - mean(b_c)|`` per image for ``[N, 3, H, W]`` batches."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a.mean(axis=(-1, -2)) - b.mean(axis=(-1, -2))).mean(axis=-1)


@dataclass
class SweepResult:
    """Per-image measurements; one row per (variant, rate level, image)."""

    rows: list[dict]

    def labels(self) -> list[str]:
        return list(dict.fromkeys(r["label"] for r in self.rows))

    def select(self, label: str, rate_level: Optional[int] = None) -> list[dict]:
        return [r for r in self.rows
                if r["label"] == label and (rate_level is None or r["rate_level"] == rate_level)]

    def per_image(self, label: str, rate_level: int, key: str) -> np.ndarray:
        rows = sorted(self.select(label, rate_level), key=lambda r: r["index"])
        return np.array([r[key] for r in rows])

    def mean(self, label: str, rate_level: int, key: str) -> float:
        return float(self.per_image(label, rate_level, key).mean())

    def levels(self, label: str) -> list[int]:
        return sorted({r["rate_level"] for r in self.select(label)})

    def curve(self, label: str, metric: str = "ms_ssim", rate: str = "bpp") -> RdCurve:
        levels = self.levels(label)
        return RdCurve.from_arrays(label, [self.mean(label, s, rate) for s in levels],
                                   [self.mean(label, s, metric) for s in levels], metric, levels)

    def curve_records(self, metrics: Sequence[str] = METRICS) -> list[dict]:
        out = []
        for label in self.labels():
            for s in self.levels(label):
                bpp = self.mean(label, s, "bpp")
                payload = self.mean(label, s, "payload_bpp")
                for m in metrics:
                    out.append({"label": label, "rate_level": s, "bpp": bpp, "payload_bpp": payload,
                                "metric": m, "value": self.mean(label, s, m)})
        return out


def write_jsonl(records: Iterable[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    return path


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def curves_from_records(records: Iterable[dict], metric: str, rate: str = "bpp") -> dict[str, RdCurve]:
    grouped: dict[str, list[RdPoint]] = {}
    for r in records:
        if r["metric"] == metric:
            grouped.setdefault(r["label"], []).append(RdPoint(r[rate], r["value"], r["rate_level"], metric))
    return {label: RdCurve(label, pts) for label, pts in grouped.items()}


def run_rd_sweep(
    system: GenerativeCodec,
    images: np.ndarray,
    rate_levels: Optional[Sequence[int]] = None,
    seed: int = 0,
    variants: Sequence[str] = ("full",),
    additive: Optional[GenerativeCodec] = None,
    steps: Optional[int] = None,
    perceptual: Callable = lpips_proxy,
    batch: int = 50,
) -> SweepResult:
    """Encode every test image at every level, decode under each variant, measure.

    Variants: ``full`` (adapter and renormalization), ``no_adapter``
    (unconditioned prior), ``no_renorm``, ``additive`` (an adapter trained with
    additive fusion, passed as ``additive``). Every variant decodes the same
    streams with the per-image seed ``derive_seed(seed, index)``.
    """
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}; choose from {VARIANTS}")
    if "additive" in variants and additive is None:
        raise ValueError("the additive variant needs a system with an additive-fusion adapter")
    rate_levels = range(system.codec.levels) if rate_levels is None else rate_levels
    images = np.asarray(images, dtype=np.float32)
    n = len(images)
    pixels = images.shape[-1] * images.shape[-2]
    seeds = [derive_seed(seed, i) for i in range(n)]
    rows = []
    for s in rate_levels:
        parsed = []
        sizes = []
        for i in range(n):
            stream = system.encode(torch.from_numpy(images[i]), s, seeds[i])
            p = system.parse(stream)
            parsed.append(p)
            sizes.append((len(stream), p.stream.payload_bytes))
        for v in variants:
            decoder = additive if v == "additive" else system
            recs = []
            for start in range(0, n, batch):
                chunk = parsed[start:start + batch]
                out = decoder.reconstruct([p.latent.y_q for p in chunk], s,
                                          [p.stream.seed for p in chunk], steps,
                                          use_adapter=(v != "no_adapter")).double().numpy()
                if v != "no_renorm":
                    out = np.stack([apply_renorm(o, p.renorm) for o, p in zip(out, chunk)])
                recs.append(out)
            rec = np.concatenate(recs).astype(np.float32)
            x, y = torch.from_numpy(images), torch.from_numpy(rec)
            quality = ms_ssim(x, y).double().numpy()
            perc = np.array([float(perceptual(x[i], y[i])) for i in range(n)])
            err = mean_channel_error(images, rec)
            for i in range(n):
                rows.append({
                    "label": v, "rate_level": int(s), "index": i,
                    "bpp": 8 * sizes[i][0] / pixels, "payload_bpp": 8 * sizes[i][1] / pixels,
                    "ms_ssim": float(quality[i]), "lpips_proxy": perc[i], "mean_error": float(err[i]),
                })
    return SweepResult(rows)


def rate_monotone(payload_bpp: Sequence[float], tolerance: float = 0.02) -> bool:
    """Non-increasing in level order, allowing one adjacent violation of at most ``tolerance``."""
    r = np.asarray(payload_bpp, dtype=np.float64)
    rise = (r[1:] - r[:-1]) / r[:-1]
    violations = rise[rise > 0]
    return len(violations) == 0 or (len(violations) == 1 and violations[0] <= tolerance)
