"""Matplotlib figures for reports (Agg backend, files only)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_series(report, path: Path):
    fig, ax = plt.subplots(figsize=(5, 3.2))
    layer_cols = [k for k in report.rows[0] if k.startswith("consistency_layer_")]
    x = np.arange(1, len(report.rows) + 1)
    for col in layer_cols:
        ax.plot(x, [r[col] for r in report.rows], marker="o", label=col.replace("consistency_", ""))
    ax.set_xticks(x, [str(r["interval_index"]) for r in report.rows])
    ax.set_xlabel("interval")
    ax.set_ylabel("cross-view inconsistency")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_query_grid(queries, path: Path, channel: int = 0):
    L, V = len(queries.maps), queries.n_views
    fig, axes = plt.subplots(L, V, figsize=(1.2 * V, 1.2 * L), squeeze=False)
    for l, m in enumerate(queries.maps):
        lim = float(np.abs(m[..., channel]).max()) or 1.0
        for v in range(V):
            ax = axes[l, v]
            ax.imshow(m[v, ..., channel], cmap="RdBu", vmin=-lim, vmax=lim)
            ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)


def plot_ablation(rows: list[dict], path: Path):
    fig, ax = plt.subplots(figsize=(5, 3))
    names = [r["mode"] for r in rows]
    ax.bar(names, [r["consistency"] for r in rows], color="0.5")
    ax.set_ylabel("final inconsistency")
    ax.tick_params(axis="x", labelrotation=20, labelsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
