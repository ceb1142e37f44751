"""Accuracy-vs-compression figures rendered next to the curve CSVs."""
from __future__ import annotations

import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.ticker import FuncFormatter, NullFormatter  # noqa: E402

from .experiment import TABLE_NAMES, ExperimentResult  # noqa: E402

STYLE = {"finetune": ("tab:blue", "o"), "weight_rewind": ("tab:orange", "s"),
         "lr_rewind": ("tab:green", "^")}


def plot_curves(result: ExperimentResult, path: str | os.PathLike, title: str = "") -> Path:
    """Median accuracy per strategy with 10th/90th percentile error bars, log compression axis."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6.4, 4.2), dpi=120)
    for strategy in result.strategies:
        pts = result.points(strategy)
        if not pts:
            continue
        color, marker = STYLE.get(strategy, (None, "o"))
        x = [p.compression for p in pts]
        y = [100 * p.median_acc for p in pts]
        err = [[100 * (p.median_acc - p.ci_low) for p in pts], [100 * (p.ci_high - p.median_acc) for p in pts]]
        ax.errorbar(x, y, yerr=err, label=TABLE_NAMES.get(strategy, strategy), color=color,
                    marker=marker, capsize=3, linewidth=1.4, markersize=4)
    if result.baseline_accuracy is not None:
        ax.axhline(100 * result.baseline_accuracy, color="0.4", linestyle="--", linewidth=1,
                   label="dense baseline")
    ax.set_xscale("log")
    ticks = sorted({round(p.compression, 2) for p in result.points()})
    if ticks:
        ax.set_xticks(ticks)
        ax.xaxis.set_major_formatter(FuncFormatter(lambda v, _: f"{v:g}x"))
        ax.xaxis.set_minor_formatter(NullFormatter())
    ax.set_xlabel("compression ratio")
    ax.set_ylabel("validation accuracy (%)")
    if title:
        ax.set_title(title)
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    # fixed metadata keeps the PNG reproducible across runs
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path
