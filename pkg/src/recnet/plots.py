"""Figures written next to the delimited reports.

Everything renders off-screen through the Agg backend. PNG metadata is
stripped of the software tag so repeated runs produce identical bytes.
"""

from __future__ import annotations

import math
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_STYLE = {
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_pr_curve(curve, path, title: str = "Place recognition") -> None:
    with plt.rc_context(_STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
        ax1.plot(curve.thresholds, curve.precision, marker=".", label="precision")
        ax1.plot(curve.thresholds, curve.recall, marker=".", label="recall")
        ax1.set_xlabel("threshold")
        ax1.set_ylim(-0.02, 1.02)
        ax1.legend()
        ax2.plot(curve.recall, curve.precision, marker=".")
        ax2.set_xlabel("recall")
        ax2.set_ylabel("precision")
        ax2.set_xlim(-0.02, 1.02)
        ax2.set_ylim(-0.02, 1.02)
        fig.suptitle(title)
        _save(fig, path)


def plot_similarity(rows, path, radius: float = 0.5) -> None:
    """Grouped bars (mean with std whiskers) for each method and metric."""
    labels = [f"Corr@{radius:g}m", "GeomSim", "NormSim", "CurvSim"]
    x = np.arange(len(labels))
    width = 0.8 / max(1, len(rows))
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(6.5, 3.2))
        for i, row in enumerate(rows):
            ax.bar(x + (i - (len(rows) - 1) / 2) * width, row.mean, width, yerr=row.std, capsize=2, label=row.method)
        ax.set_xticks(x, labels)
        ax.set_ylabel("[%]")
        ax.set_ylim(0, 105)
        ax.legend(fontsize=7)
        _save(fig, path)


def plot_bandwidth(columns: dict, path) -> None:
    names = list(columns)
    raw = [columns[n].raw_rate for n in names]
    desc = [columns[n].descriptor_rate for n in names]
    x = np.arange(len(names))
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        ax.bar(x - 0.2, raw, 0.4, label="original clouds")
        ax.bar(x + 0.2, desc, 0.4, label="bottleneck vectors")
        ax.set_xticks(x, names)
        ax.set_ylabel("bandwidth [kB/s]")
        if all(v > 0 for v in raw + desc):
            ax.set_yscale("log")
        ax.legend(fontsize=7)
        _save(fig, path)


def plot_training_log(rows: Sequence, path) -> None:
    """Loss terms per step from ``(step, LossReport)`` rows."""
    if not rows:
        return
    steps = [s for s, _ in rows]
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.2))
        for name in ("total", "l_mse", "l_grad", "l_pr"):
            values = [getattr(r, name) for _, r in rows]
            if all(v > 0 and math.isfinite(v) for v in values):
                ax.plot(steps, values, lw=0.8, label=name)
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.legend(fontsize=7)
        _save(fig, path)
