"""PNG figures for metrics reports (headless Agg backend)."""

from __future__ import annotations

import math
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 8,
    "figure.dpi": 100,
}
# no timestamps or version strings, so reruns give identical files
PNG_META = {"Software": None}


def _finite(values):
    return [v for v in values if isinstance(v, (int, float)) and math.isfinite(v)]


def _save(fig, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path, format="png", metadata=PNG_META)
    plt.close(fig)


def plot_curves(rows, x: str, columns, path: str, title: str = ""):
    """One panel per column that has at least one finite value, against ``x``."""
    cols = [c for c in columns if _finite([r.get(c) for r in rows])]
    with plt.rc_context(STYLE):
        n = max(len(cols), 1)
        fig, axes = plt.subplots(n, 1, figsize=(6.0, 1.8 * n), sharex=True, squeeze=False)
        for ax, col in zip(axes[:, 0], cols):
            pts = [(r[x], r[col]) for r in rows
                   if isinstance(r.get(col), (int, float)) and math.isfinite(r[col])]
            ax.plot([p[0] for p in pts], [p[1] for p in pts], lw=1.0, marker="." if len(pts) < 30 else None)
            ax.set_ylabel(col)
        if not cols:
            axes[0, 0].text(0.5, 0.5, "no finite values", ha="center", va="center")
        axes[-1, 0].set_xlabel(x)
        if title:
            axes[0, 0].set_title(title)
        fig.tight_layout()
        _save(fig, path)


def plot_bars(labels, values, path: str, ylabel: str = "", title: str = ""):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(3.0, 0.6 * len(labels) + 1.5), 3.0))
        shown = [v if math.isfinite(v) else 0.0 for v in values]
        ax.bar(range(len(labels)), shown, color="0.4")
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=30, ha="right")
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        _save(fig, path)


def plot_scatter_diagonal(x, y, path: str, xlabel: str, ylabel: str, groups=None, title: str = ""):
    """Scatter with the ``y = x`` line, used for bound checks."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 4.0))
        groups = groups if groups is not None else [""] * len(x)
        for g in sorted(set(groups)):
            idx = [i for i, gi in enumerate(groups) if gi == g]
            ax.scatter([x[i] for i in idx], [y[i] for i in idx], s=12, label=g or None)
        hi = max(_finite(list(x) + list(y)) or [1.0])
        ax.plot([0, hi], [0, hi], color="0.5", lw=0.8, ls="--")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if any(groups):
            ax.legend(frameon=False)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        _save(fig, path)
