"""Matplotlib figures rendered alongside each report.

All rendering uses the Agg backend and strips the writer's software tag so
that repeated runs produce byte-identical PNG files.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)

_DPI = 120


def save_figure(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path, format="png", dpi=_DPI, metadata={"Software": None})
    plt.close(fig)
    return path


def line_plot(x: Sequence[float], series: dict[str, Sequence[float]],
              xlabel: str, ylabel: str, title: str, logx: bool = False):
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    for label in sorted(series):
        ax.plot(x, series[label], marker="o", label=label)
    if logx:
        ax.set_xscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if len(series) > 1:
        ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    return fig


def grouped_bars(categories: Sequence[str], series: dict[str, Sequence[float]],
                 ylabel: str, title: str):
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    n_series = max(len(series), 1)
    width = 0.8 / n_series
    for k, label in enumerate(sorted(series)):
        offsets = [i + (k - (n_series - 1) / 2) * width for i in range(len(categories))]
        ax.bar(offsets, series[label], width=width, label=label)
    ax.set_xticks(range(len(categories)))
    ax.set_xticklabels(categories, fontsize=8)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if len(series) > 1:
        ax.legend(fontsize=8)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    return fig


def reliability_diagram(buckets: Sequence, title: str):
    """Per-bucket accuracy bars against the perfect-calibration diagonal."""
    fig, ax = plt.subplots(figsize=(4.2, 4.0))
    centers = [(b.lower + b.upper) / 2 for b in buckets]
    widths = [b.upper - b.lower for b in buckets]
    accs = [b.accuracy if b.count else 0.0 for b in buckets]
    ax.bar(centers, accs, width=[w * 0.95 for w in widths], label="accuracy",
           edgecolor="black", linewidth=0.5)
    ax.plot([0, 1], [0, 1], linestyle="--", color="gray", label="perfect")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("confidence")
    ax.set_ylabel("accuracy")
    ax.set_title(title)
    ax.legend(fontsize=8, loc="upper left")
    fig.tight_layout()
    return fig


def loss_curves(records: Sequence[dict], title: str):
    """Training-log curves: one line per numeric log field over epochs."""
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    if records:
        keys = [k for k in sorted(records[0]) if k not in ("epoch", "step", "lr")
                and isinstance(records[0][k], (int, float)) and records[0][k] is not None]
        xs = [r.get("epoch", i) for i, r in enumerate(records)]
        for key in keys:
            ys = [r.get(key) for r in records]
            if any(y is None for y in ys):
                continue
            ax.plot(xs, ys, marker=".", label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    return fig
