"""Figures written next to the CSV/JSON outputs (headless matplotlib)."""

from __future__ import annotations

import os
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .models.metrics import MetricsReport  # noqa: E402


def plot_roc(reports: Mapping[str, MetricsReport], path: str | os.PathLike, title: str = "ROC") -> None:
    """One curve per model, legend carries the AUC."""
    fig, ax = plt.subplots(figsize=(5.5, 5))
    for name, rep in reports.items():
        fpr, tpr = np.asarray(rep.roc_points, dtype=np.float64).T
        ax.plot(fpr, tpr, lw=1.5, label=f"{name} (AUC {rep.auc:.4f})")
    ax.plot([0, 1], [0, 1], ls="--", lw=0.8, color="grey")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.01)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_title(title)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_windows(reports: Sequence, path: str | os.PathLike, title: str = "Capture windows") -> None:
    """Packets seen vs dropped at ingress per window; blocks are annotated."""
    idx = np.array([r.window_index for r in reports])
    seen = np.array([r.packets_seen for r in reports])
    dropped = np.array([r.packets_dropped_at_ingress for r in reports])
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(idx - 0.2, seen, width=0.4, label="seen")
    ax.bar(idx + 0.2, dropped, width=0.4, label="dropped at ingress")
    top = max(int(seen.max()) if seen.size else 1, 1)
    for r in reports:
        if r.ips_blocked:
            shown = ", ".join(r.ips_blocked[:2])
            more = len(r.ips_blocked) - 2
            ax.annotate(
                f"block {shown}" + (f" +{more}" if more > 0 else ""),
                (r.window_index, r.packets_seen),
                xytext=(0, 6),
                textcoords="offset points",
                ha="center",
                fontsize=8,
            )
    ax.set_ylim(0, top * 1.15)
    ax.set_xticks(idx)
    ax.set_xlabel("window")
    ax.set_ylabel("packets")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
