"""PNG figures for training logs, evaluation reports and attention dumps.

Figures are built on the object-oriented matplotlib API with the Agg canvas,
so nothing touches pyplot's global state or needs a display.
"""

from __future__ import annotations

from collections.abc import Sequence
from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

_PNG_META = {"Software": None}


def _figure(width: float = 6.0, height: float = 4.0) -> tuple[Figure, object]:
    fig = Figure(figsize=(width, height), dpi=100)
    FigureCanvasAgg(fig)
    return fig, fig.add_subplot(1, 1, 1)


def _save(fig: Figure, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=_PNG_META)
    return path


def plot_loss_curve(rows: Sequence[tuple], path: str | Path) -> Path:
    """Total, main and auxiliary loss per iteration, with the learning rate on a twin axis."""
    fig, ax = _figure()
    if rows:
        arr = np.asarray(rows, dtype=np.float64)
        it = arr[:, 0]
        ax.plot(it, arr[:, 2], label="total")
        ax.plot(it, arr[:, 3], label="main", alpha=0.8)
        ax.plot(it, arr[:, 4], label="aux", alpha=0.8)
        lr_ax = ax.twinx()
        lr_ax.plot(it, arr[:, 1], color="0.5", linestyle="--", linewidth=1)
        lr_ax.set_ylabel("learning rate")
        ax.legend(loc="upper right")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    return _save(fig, path)


def plot_class_iou(per_class: Sequence[float], path: str | Path, mean_iou: float | None = None) -> Path:
    fig, ax = _figure()
    vals = np.asarray(per_class, dtype=np.float64)
    xs = np.arange(len(vals))
    ax.bar(xs, np.nan_to_num(vals), color=["C0" if np.isfinite(v) else "0.8" for v in vals])
    if mean_iou is not None:
        ax.axhline(mean_iou, color="C3", linestyle="--", label=f"mIoU {mean_iou:.3f}")
        ax.legend(loc="lower right")
    ax.set_xticks(xs)
    ax.set_ylim(0, 1)
    ax.set_xlabel("class")
    ax.set_ylabel("IoU")
    return _save(fig, path)


def plot_confusion(counts: np.ndarray, path: str | Path) -> Path:
    """Row-normalised confusion matrix (rows ground truth)."""
    counts = np.asarray(counts, dtype=np.float64)
    rows = counts.sum(axis=1, keepdims=True)
    norm = np.divide(counts, rows, out=np.zeros_like(counts), where=rows > 0)
    fig, ax = _figure(5.0, 4.5)
    im = ax.imshow(norm, vmin=0, vmax=1, cmap="Blues")
    for (r, c), v in np.ndenumerate(norm):
        ax.text(c, r, f"{v:.2f}", ha="center", va="center", color="white" if v > 0.5 else "black", fontsize=8)
    fig.colorbar(im, ax=ax)
    ax.set_xlabel("predicted")
    ax.set_ylabel("ground truth")
    return _save(fig, path)


def plot_attention(
    memory: Sequence[np.ndarray],
    query: np.ndarray,
    heatmaps: np.ndarray,
    pixel: tuple[int, int],
    path: str | Path,
) -> Path:
    """Query frame with the chosen pixel, then each memory frame under its attention heatmap.

    ``heatmaps`` has shape (T, h, w) at feature resolution; it is stretched
    over the frame extent.
    """
    T = len(memory)
    fig = Figure(figsize=(2.4 * (T + 1), 2.6), dpi=100)
    FigureCanvasAgg(fig)
    H, W = query.shape[1:]
    extent = (-0.5, W - 0.5, H - 0.5, -0.5)
    ax = fig.add_subplot(1, T + 1, 1)
    ax.imshow(np.clip(np.transpose(query, (1, 2, 0)), 0, 1))
    ax.plot([pixel[1]], [pixel[0]], marker="x", color="red")
    ax.set_title("query")
    ax.axis("off")
    vmax = float(heatmaps.max()) if heatmaps.size else 1.0
    for t in range(T):
        ax = fig.add_subplot(1, T + 1, t + 2)
        ax.imshow(np.clip(np.transpose(memory[t], (1, 2, 0)), 0, 1))
        ax.imshow(heatmaps[t], cmap="inferno", alpha=0.6, vmin=0, vmax=vmax, extent=extent, interpolation="nearest")
        ax.set_title(f"memory {t}")
        ax.axis("off")
    return _save(fig, path)
