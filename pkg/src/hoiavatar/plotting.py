"""Report figures: loss curves, metric summaries, frame strips."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
}


def _smooth(y: np.ndarray, window: int) -> np.ndarray:
    if len(y) < window or window < 2:
        return y
    k = np.ones(window) / window
    return np.convolve(y, k, mode="valid")


def plot_loss_curves(reports: Sequence[dict], path, window: int = 25) -> Path:
    """One panel per stage; raw losses faint, running mean per recipe kind solid."""
    path = Path(path)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, max(1, len(reports)), figsize=(4.2 * max(1, len(reports)), 3.0), squeeze=False)
        for ax, rep in zip(axes[0], reports):
            losses = np.asarray(rep["losses"], dtype=np.float64)
            kinds = np.asarray(rep["kinds"])
            ax.plot(losses, color="0.75", lw=0.6, label="loss")
            for kind in sorted(set(kinds.tolist())):
                sel = np.flatnonzero(kinds == kind)
                if len(sel) >= window:
                    ys = _smooth(losses[sel], window)
                    ax.plot(sel[window - 1:], ys, lw=1.2, label=kind.lower())
            ax.set_yscale("log")
            ax.set_title(rep["stage"].lower())
            ax.set_xlabel("step")
            ax.legend(fontsize=7, frameon=False)
        axes[0][0].set_ylabel("flow-matching loss")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_metric_summary(per_episode: dict[str, dict], path, columns=("pi", "dd", "sharpness", "box_err")) -> Path:
    """Histogram per available metric across episodes."""
    path = Path(path)
    cols = [c for c in columns if any(isinstance(r.get(c), float) for r in per_episode.values())]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, max(1, len(cols)), figsize=(3.2 * max(1, len(cols)), 2.6), squeeze=False)
        for ax, c in zip(axes[0], cols):
            vals = [r[c] for r in per_episode.values() if isinstance(r.get(c), float)]
            ax.hist(vals, bins=min(20, max(3, len(vals) // 2)), color="#4a72b0")
            ax.axvline(np.mean(vals), color="k", lw=1, ls="--")
            ax.set_title(f"{c} (mean {np.mean(vals):.3f})")
        if not cols:
            axes[0][0].text(0.5, 0.5, "no metrics available", ha="center", va="center")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def save_frame_strip(rows: Sequence[np.ndarray], path, scale: int = 4) -> Path:
    """Stack ``(N, H, W, 3)`` clips as rows of a single image (nearest-neighbour upscale)."""
    path = Path(path)
    strips = [np.concatenate(list(r), axis=1) for r in rows]
    width = max(s.shape[1] for s in strips)
    strips = [np.pad(s, ((0, 0), (0, width - s.shape[1]), (0, 0))) for s in strips]
    img = np.concatenate(strips, axis=0)
    img = img.repeat(scale, 0).repeat(scale, 1)
    with plt.rc_context(STYLE):
        plt.imsave(path, img)
    return path
