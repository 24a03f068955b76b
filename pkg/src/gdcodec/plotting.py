"""Static rate-distortion figures written to image files."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import METRICS, RdCurve, SweepResult, write_jsonl  # noqa: E402

golden_mean = (5 ** 0.5 - 1) / 2
fig_width = 4.0

colors = ["#08589e", "#e6550d", "#31a354", "#756bb1", "#636363", "#d6616b"]
markers = ["o", "s", "^", "D", "v", "x"]

params = {
    "axes.prop_cycle": matplotlib.cycler(color=colors),
    "axes.labelsize": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.family": "sans-serif",
    "font.size": 8,
    "legend.fontsize": 7,
    "legend.frameon": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.figsize": [fig_width, fig_width * golden_mean],
    "figure.dpi": 150,
    "lines.markersize": 4,
    "lines.linewidth": 1.2,
    "savefig.bbox": "tight",
}

METRIC_LABELS = {
    "ms_ssim": "MS-SSIM",
    "lpips_proxy": "LPIPS proxy (lower is better)",
    "mean_error": "mean channel error",
}


def plot_rd(curves: Sequence[RdCurve] | Mapping[str, RdCurve], path, title: Optional[str] = None,
            logx: bool = False, rate_label: str = "bpp") -> Path:
    """Draw one line per curve (bpp on x, the curve's metric on y) and save it."""
    if isinstance(curves, Mapping):
        curves = list(curves.values())
    if not curves:
        raise ValueError("nothing to plot")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    metric = curves[0].metric
    with plt.rc_context(params):
        fig, ax = plt.subplots()
        for i, c in enumerate(curves):
            ax.plot(c.rates, c.distortions, marker=markers[i % len(markers)], label=c.label)
        ax.set_xlabel(rate_label)
        ax.set_ylabel(METRIC_LABELS.get(metric, metric))
        if logx:
            ax.set_xscale("log")
        if title:
            ax.set_title(title)
        ax.legend()
        fig.savefig(path)
        plt.close(fig)
    return path


def write_report(result: SweepResult, out) -> Path:
    """Write per-image rows, curve records and one RD figure per metric to ``out``."""
    out = Path(out)
    write_jsonl(result.rows, out / "per_image.jsonl")
    path = write_jsonl(result.curve_records(), out / "curves.jsonl")
    for metric in METRICS:
        plot_rd([result.curve(label, metric) for label in result.labels()], out / f"rd_{metric}.png")
    return path
