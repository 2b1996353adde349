"""PNG figures of traces and level step functions.

Uses the object-oriented Agg canvas so importing this module never touches
pyplot's global backend.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from spinefuse.labels import CLASS_NAMES

_TRACE_COLORS = {"force": "tab:red", "us": "tab:blue"}
# Fixed metadata keeps reruns byte-identical.
_PNG_METADATA = {"Software": None}


def _save(fig: Figure, path) -> None:
    FigureCanvasAgg(fig)
    fig.savefig(Path(path), dpi=100, metadata=_PNG_METADATA)


def plot_sequence(path, plots, title: str | None = None) -> None:
    """Traces on top, one predicted-vs-true step panel per modality below.

    ``plots`` is a list of :class:`~spinefuse.evaluation.PlotData` for the
    same sequence (one per modality).
    """
    if not plots:
        raise ValueError("nothing to plot")
    first = plots[0]
    fig = Figure(figsize=(8, 2.0 + 1.6 * len(plots)))
    axes = fig.subplots(1 + len(plots), 1, sharex=True)
    ax = axes[0]
    ax.plot(first.pos_mm, first.force, color=_TRACE_COLORS["force"], lw=1, label="force")
    ax.plot(first.pos_mm, first.us, color=_TRACE_COLORS["us"], lw=1, label="ultrasound")
    ax.set_ylabel("normalised")
    ax.set_ylim(-0.05, 1.05)
    ax.legend(loc="upper right", fontsize=8, frameon=False)
    for ax, pd in zip(axes[1:], plots):
        ax.step(pd.pos_mm, pd.true_level, where="post", color="0.6", lw=2, label="truth")
        ax.step(pd.pos_mm, pd.pred_level, where="post", color="k", lw=1, label="predicted")
        ax.set_yticks(range(len(CLASS_NAMES)))
        ax.set_yticklabels(CLASS_NAMES, fontsize=7)
        ax.set_ylabel(pd.modality)
        ax.legend(loc="upper left", fontsize=7, frameon=False)
    axes[-1].set_xlabel("position along spine [mm]")
    fig.suptitle(title or first.sequence)
    fig.tight_layout()
    _save(fig, path)


def plot_summary(path, rows) -> None:
    """Grouped bars of correctly classified levels per split and modality."""
    splits = list(dict.fromkeys(r["split"] for r in rows))
    modalities = list(dict.fromkeys(r["modality"] for r in rows))
    width = 0.8 / max(len(modalities), 1)
    fig = Figure(figsize=(6, 3.5))
    ax = fig.subplots()
    x = np.arange(len(splits))
    for j, m in enumerate(modalities):
        counts = [next(r["n_correct"] for r in rows if r["split"] == s and r["modality"] == m)
                  for s in splits]
        ax.bar(x + (j - (len(modalities) - 1) / 2) * width, counts, width, label=m)
    totals = [next(r["n_total"] for r in rows if r["split"] == s) for s in splits]
    for xi, t in zip(x, totals):
        ax.plot([xi - 0.45, xi + 0.45], [t, t], color="0.4", lw=1, ls="--")
    ax.set_xticks(x)
    ax.set_xticklabels(splits)
    ax.set_ylabel("correctly classified levels")
    ax.legend(fontsize=8, frameon=False)
    fig.tight_layout()
    _save(fig, path)
