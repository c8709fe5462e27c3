"""Static figures for sweep reports. Output SVGs are byte-stable across runs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
from matplotlib import pyplot as plt  # noqa: E402

STYLE = {
    "svg.hashsalt": "vflkit",
    "svg.fonttype": "path",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.linestyle": "dashed",
    "grid.linewidth": 0.3,
    "grid.color": "0.6",
    "xtick.direction": "in",
    "ytick.direction": "in",
}


def _save(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def change_rate_figure(reports: Sequence, path: str | Path) -> Path:
    """Change rate (%) against swap layer, one line per task report."""
    path = Path(path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 2.8))
        for rep in reports:
            xs = [r.layer for r in rep.layers]
            ax.plot(xs, [r.change_rate for r in rep.layers], marker="o", ms=3, lw=1.2,
                    label=rep.task)
        ax.set_xlabel("swap layer k (0-based)")
        ax.set_ylabel("change rate (%)")
        ax.set_ylim(-3, 103)
        ax.legend(frameon=False, fontsize=8)
        fig.tight_layout()
        _save(fig, path)
    return path


def drop_figure(report, path: str | Path) -> Path:
    path = Path(path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 2.8))
        ax.plot([r.k for r in report.rows], [r.accuracy for r in report.rows], marker="s", ms=3,
                lw=1.2, color="C3", label="+".join(report.tasks))
        ax.axhline(report.baseline.accuracy, color="0.4", lw=0.8, ls=":", label="no drop")
        ax.set_xlabel("vision dropped from layer k")
        ax.set_ylabel("accuracy (%)")
        ax.set_ylim(-3, 103)
        ax.legend(frameon=False, fontsize=8)
        fig.tight_layout()
        _save(fig, path)
    return path
