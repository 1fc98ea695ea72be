"""Matplotlib figures for aggregated audit reports (rendered off-screen)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _bars(ax, labels, series: dict[str, tuple[list[float], list[float]]], ylabel: str):
    x = np.arange(len(labels))
    width = 0.8 / max(1, len(series))
    for k, (name, (mean, std)) in enumerate(series.items()):
        ax.bar(x + (k - (len(series) - 1) / 2) * width, mean, width, yerr=std, capsize=3, label=name)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylabel(ylabel)
    ax.axhline(0.0, color="black", linewidth=0.6)
    ax.legend(frameon=False)


def forgetting_figure(summary: dict[str, dict[str, tuple[float, float]]], path: Path) -> Path:
    """FAD and RAD per method (mean with std error bars)."""
    methods = sorted(summary)
    series = {m: ([summary[k][m][0] for k in methods], [summary[k][m][1] for k in methods]) for m in ("fad", "rad")}
    fig, ax = plt.subplots(figsize=(6, 3.6))
    _bars(ax, methods, series, "accuracy drop")
    ax.set_title("Forgetting vs. retention damage (fp32)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def recovery_figure(recovery: dict[str, dict[str, tuple[float, float]]], path: Path) -> Path:
    """Forgetting recovered by quantization, per method and bit width."""
    methods = sorted(recovery)
    precs = sorted({p for r in recovery.values() for p in r})
    series = {p: ([recovery[m].get(p, (0.0, 0.0))[0] for m in methods],
                  [recovery[m].get(p, (0.0, 0.0))[1] for m in methods]) for p in precs}
    fig, ax = plt.subplots(figsize=(6, 3.6))
    if precs:
        _bars(ax, methods, series, "FC recovery (fp32 - quantized)")
    ax.set_title("Quantization recovery")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
