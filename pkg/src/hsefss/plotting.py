"""Figures written next to the JSON/CSV/text reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FIGSIZE = (6.0, 3.6)


def _finish(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_loss_curve(curve, path, title: str = "training loss") -> Path:
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.plot(np.arange(1, len(curve) + 1), curve, marker="o", ms=3, lw=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean episode loss")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    return _finish(fig, path)


def plot_per_class_iou(per_class: dict, miou: float, path, title: str = "") -> Path:
    names = list(per_class)
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.bar(names, [per_class[n] for n in names], color="#4c72b0")
    ax.axhline(miou, color="#c44e52", ls="--", lw=1, label=f"mIoU {miou:.3f}")
    ax.set_ylim(0, 1)
    ax.set_ylabel("IoU")
    ax.set_title(title or "per-class IoU")
    ax.legend(loc="upper right", frameon=False)
    return _finish(fig, path)


def plot_ablation(table, path) -> Path:
    rows = table.rows
    folds = [str(f) for f in table.folds]
    x = np.arange(len(rows))
    width = 0.8 / (len(folds) + 1)
    fig, ax = plt.subplots(figsize=(max(6.0, 1.6 * len(rows)), 3.8))
    for i, f in enumerate(folds):
        ax.bar(x + i * width, [r.folds[f] for r in rows], width, label=f"split {f}")
    ax.bar(x + len(folds) * width, [r.mean for r in rows], width, label="mean", color="k", alpha=0.7)
    ax.set_xticks(x + width * len(folds) / 2)
    ax.set_xticklabels([r.label for r in rows], rotation=15, ha="right")
    ax.set_ylabel("mIoU")
    ax.set_ylim(0, 1)
    ax.legend(frameon=False, ncol=len(folds) + 1, fontsize=8)
    return _finish(fig, path)


def plot_prediction(image, truth, prior, pred, path, title: str = "") -> Path:
    """Four panels: query image, ground truth, prior mask, prediction."""
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[0] == 3:
        img = img.transpose(1, 2, 0)
    fig, axes = plt.subplots(1, 4, figsize=(10, 2.9))
    panels = [(img, None, "query"), (truth, "gray", "ground truth"), (prior, "magma", "prior mask"), (pred, "gray", "prediction")]
    for ax, (data, cmap, label) in zip(axes, panels):
        ax.imshow(data, cmap=cmap, vmin=0 if cmap else None, vmax=1 if cmap else None, interpolation="nearest")
        ax.set_title(label, fontsize=9)
        ax.axis("off")
    if title:
        fig.suptitle(title, fontsize=10)
    return _finish(fig, path)
