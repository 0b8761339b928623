"""Render evaluation figures to files next to the delimited output."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Mapping

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be fixed first)

from .evaluation import CurvePoint

_STYLE = {
    ("baseline", "joint"): {"color": "#777777", "linestyle": "--"},
    ("hbayes", "joint"): {"color": "#1f77b4", "linestyle": "-"},
    ("hbayes", "joint+param"): {"color": "#d62728", "linestyle": "-."},
}


def coverage_accuracy_figure(curves: Iterable[CurvePoint], path: str | Path) -> Path:
    """Accuracy versus coverage, one line per (model, thresholding mode)."""
    series: dict[tuple[str, str], list[CurvePoint]] = {}
    for pt in curves:
        series.setdefault((pt.model, pt.mode), []).append(pt)

    fig, ax = plt.subplots(figsize=(6.0, 4.0), dpi=120)
    for key in sorted(series):
        pts = [p for p in sorted(series[key], key=lambda p: p.threshold) if p.accuracy is not None]
        ax.plot(
            [p.coverage for p in pts],
            [p.accuracy for p in pts],
            label=f"{key[0]} ({key[1]})",
            marker=".",
            markersize=4,
            **_STYLE.get(key, {}),
        )
    ax.set_xlabel("coverage")
    ax.set_ylabel("accuracy")
    ax.set_xlim(0.0, 1.0)
    ax.set_title("Accuracy versus coverage")
    ax.grid(True, alpha=0.3)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    out = Path(path)
    fig.savefig(out)
    plt.close(fig)
    return out


def elbo_trace_figure(traces: Mapping[int, tuple[float, ...]], path: str | Path) -> Path:
    """Objective value per sweep, one line per fold."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0), dpi=120)
    for fold in sorted(traces):
        values = traces[fold]
        ax.plot(range(1, len(values) + 1), values, marker=".", markersize=4, label=f"fold {fold}")
    ax.set_xlabel("sweep")
    ax.set_ylabel("objective (ELBO)")
    ax.set_title("Variational objective per sweep")
    ax.grid(True, alpha=0.3)
    if traces:
        ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    out = Path(path)
    fig.savefig(out)
    plt.close(fig)
    return out
