"""Figures written next to sweep CSVs and training logs."""

from __future__ import annotations

import io
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .io import atomic_write_bytes  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "savefig.dpi": 150,
}

COLORS = {
    "infonce": "#d1495b",
    "bixse": "#00798c",
    "soft_infonce": "#edae49",
    "margin_mse": "#66a182",
    "pairwise_bce": "#2e4057",
    "lambda_ndcg1": "#8d96a3",
    "lambda_ndcg2": "#9b5de5",
}


def _save(fig, path) -> None:
    buf = io.BytesIO()
    # drop the Software tag so reruns give identical bytes
    fig.savefig(buf, format="png", bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def _median(values):
    vals = sorted(v for v in values if v == v)
    n = len(vals)
    if not n:
        return float("nan")
    return vals[n // 2] if n % 2 else 0.5 * (vals[n // 2 - 1] + vals[n // 2])


def plot_sweep(rows: Sequence[dict], x: str, path, *, group: str = "loss",
               y: str = "ndcg@10", xlabel: str | None = None, title: str | None = None,
               categorical: bool = False) -> Path:
    """Per-seed points plus a median line for each group."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        groups = list(dict.fromkeys(r[group] for r in rows)) if group else [None]
        xs_all = list(dict.fromkeys(r[x] for r in rows))
        pos = {v: i for i, v in enumerate(xs_all)}
        for gname in groups:
            sub = [r for r in rows if group is None or r[group] == gname]
            color = COLORS.get(str(gname))
            px = [pos[r[x]] if categorical else r[x] for r in sub]
            ax.scatter(px, [r[y] for r in sub], s=8, alpha=0.35, color=color)
            xs = [v for v in xs_all if any(r[x] == v for r in sub)]
            meds = [_median([r[y] for r in sub if r[x] == v]) for v in xs]
            ax.plot([pos[v] for v in xs] if categorical else xs, meds, marker="o", ms=3,
                    label=str(gname) if gname is not None else None, color=color)
        if categorical:
            ax.set_xticks(range(len(xs_all)))
            ax.set_xticklabels([str(v) for v in xs_all])
        ax.set_xlabel(xlabel or x)
        ax.set_ylabel(y)
        if title:
            ax.set_title(title)
        if group:
            ax.legend()
        _save(fig, path)
    return Path(path)


def plot_training_log(history: Sequence[dict], path, title: str | None = None) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        epochs = [h["epoch"] for h in history]
        ax.plot(epochs, [h["loss"] for h in history], marker="o", ms=3, color=COLORS["bixse"])
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean training loss")
        key = next((k for k in history[0] if k.startswith("ndcg@")), None) if history else None
        if key:
            ax2 = ax.twinx()
            ax2.plot(epochs, [h[key] for h in history], marker="s", ms=3, color=COLORS["infonce"])
            ax2.set_ylabel(key)
        if title:
            ax.set_title(title)
        _save(fig, path)
    return Path(path)
