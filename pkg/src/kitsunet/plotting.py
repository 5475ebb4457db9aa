"""Matplotlib figures written straight to files (Agg backend)."""
from __future__ import annotations

from pathlib import Path
from typing import Dict, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}

LABELS = {"dice_kidney_composite": "kidney\n(1 ∪ 2)",
          "dice_kidney_label": "kidney\n(label 1)",
          "dice_tumor": "tumor"}

# label overlay colours: kidney red, tumor blue
_OVERLAY = {1: (0.9, 0.1, 0.1, 0.45), 2: (0.1, 0.3, 0.95, 0.55)}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def loss_curve(history: Sequence[dict], path) -> Path:
    """Training loss (blue), validation loss (red), smoothed validation (green)."""
    epochs = [h["epoch"] for h in history]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.plot(epochs, [h["train_loss"] for h in history], color="tab:blue", label="train")
        ax.plot(epochs, [h["val_loss"] for h in history], color="tab:red", label="validation")
        ax.plot(epochs, [h["ema_val_loss"] for h in history], color="tab:green",
                label="validation (EMA)")
        best = int(np.argmin([h["ema_val_loss"] for h in history]))
        ax.axvline(epochs[best], color="0.6", lw=0.8, ls=":")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend(frameon=False)
        return _save(fig, path)


def boxplot_stats(summary: Dict[str, Dict[str, float]]):
    """bxp-ready stats: box = quartiles, whiskers = min/max."""
    return [{"label": LABELS.get(m, m), "med": s["median"], "q1": s["q1"], "q3": s["q3"],
             "whislo": s["min"], "whishi": s["max"], "mean": s["mean"], "fliers": []}
            for m, s in summary.items()]


def dice_boxplot(summary: Dict[str, Dict[str, float]], path) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4, 3.2))
        ax.bxp(boxplot_stats(summary), showmeans=True, showfliers=False)
        ax.set_ylabel("Dice")
        ax.set_ylim(min(0.0, min(s["min"] for s in summary.values())) - 0.02, 1.02)
        return _save(fig, path)


def slice_overlay(image: np.ndarray, gt: np.ndarray, pred: np.ndarray, path,
                  z: Optional[int] = None, title: str = "") -> Path:
    """Axial slice with ground truth and prediction side by side."""
    if z is None:
        fg = np.flatnonzero((gt > 0).sum(axis=(0, 1)))
        z = int(fg[len(fg) // 2]) if fg.size else image.shape[2] // 2
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 2, figsize=(6, 3))
        for ax, lab, name in zip(axes, (gt, pred), ("ground truth", "prediction")):
            ax.imshow(image[:, :, z].T, cmap="gray", origin="lower")
            rgba = np.zeros(lab.shape[:2] + (4,))
            for cls, colour in _OVERLAY.items():
                rgba[lab[:, :, z] == cls] = colour
            ax.imshow(rgba.transpose(1, 0, 2), origin="lower")
            ax.set_title(name)
            ax.set_axis_off()
        if title:
            fig.suptitle(title)
        return _save(fig, path)
