"""Figures written next to the CLI's tab-separated output."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (7.0, 4.0),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_parameter_counts(
    totals: Mapping[str, float],
    published: Mapping[str, Optional[float]],
    path,
) -> Path:
    """Bar chart of total parameters (millions), published values as markers."""
    names = list(totals)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(6.0, 0.6 * len(names) + 2), 4.0))
        xs = range(len(names))
        ax.bar(xs, [totals[n] / 1e6 for n in names], color="tab:blue", label="this implementation")
        ref = [(i, published[n] / 1e6) for i, n in enumerate(names) if published.get(n)]
        if ref:
            ax.scatter([i for i, _ in ref], [v for _, v in ref], color="tab:red", marker="_", s=300, linewidths=2, label="published", zorder=3)
        ax.set_xticks(list(xs))
        ax.set_xticklabels(names, rotation=40, ha="right")
        ax.set_ylabel("parameters (M)")
        ax.set_yscale("log")
        ax.legend()
        return _save(fig, path)


def plot_training_curve(steps: Sequence[int], nll: Sequence[float], path, valid: Sequence[tuple] = ()) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(steps, nll, lw=1.0, label="train")
        if valid:
            ax.plot([s for s, _ in valid], [v for _, v in valid], "o-", ms=3, label="validation")
        ax.set_xlabel("step")
        ax.set_ylabel("nll per sample (nats)")
        ax.legend()
        return _save(fig, path)
