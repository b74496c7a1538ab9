"""Figure rendering for trace files.

Figures are a convenience layered on top of the CSV traces, which stay the
canonical output. Everything renders through the Agg backend so runs work
headless.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_STYLE = {
    "figure.figsize": (6.0, 4.2),
    "font.size": 10,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.4,
    "legend.fontsize": 8,
}


def _columns(records) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    arr = np.asarray([tuple(r) for r in records], dtype=np.float64)
    return arr[:, 0], arr[:, 1], arr[:, 5]


def render_gap_figure(series: dict, out_path, title: str = "optimality gap") -> Path:
    """Semilog gap-vs-iteration comparison across labelled mean traces."""
    out_path = Path(out_path)
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        for label, records in series.items():
            its, gaps, _ = _columns(records)
            ax.semilogy(its, np.maximum(gaps, 1e-300), label=label)
        ax.set_xlabel("iteration")
        ax.set_ylabel("optimality gap")
        ax.set_title(title)
        ax.legend()
        fig.tight_layout()
        fig.savefig(out_path, dpi=130)
        plt.close(fig)
    return out_path


def render_cell_figure(per_repeat, means, out_path, tag: str) -> Path:
    """Per-cell figure: faint per-repeat traces under the mean trace."""
    out_path = Path(out_path)
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(9.5, 4.0))
        for trace in per_repeat:
            its, gaps, msgs = _columns([r.row() for r in trace])
            axes[0].semilogy(its, np.maximum(gaps, 1e-300), color="gray", alpha=0.25, lw=0.7)
            axes[1].semilogy(msgs, np.maximum(gaps, 1e-300), color="gray", alpha=0.25, lw=0.7)
        its, gaps, msgs = _columns(means)
        axes[0].semilogy(its, np.maximum(gaps, 1e-300), color="C0", label="mean")
        axes[1].semilogy(msgs, np.maximum(gaps, 1e-300), color="C0", label="mean")
        axes[0].set_xlabel("iteration")
        axes[1].set_xlabel("cumulative messages")
        for ax in axes:
            ax.set_ylabel("optimality gap")
            ax.legend()
        fig.suptitle(tag)
        fig.tight_layout()
        fig.savefig(out_path, dpi=130)
        plt.close(fig)
    return out_path
