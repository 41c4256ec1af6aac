"""Figures: consistency/error heatmap triptychs, reliability maps, curves, ablation bars."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402


def reliability_to_uint8(weights) -> np.ndarray:
    """Map weights in [0, 1] linearly onto 0..255 (darker = less reliable)."""
    w = np.asarray(weights, dtype=np.float64)
    if w.size and (np.nanmin(w) < 0 or np.nanmax(w) > 1):
        raise ValueError("reliability weights must lie in [0, 1]")
    return np.round(np.nan_to_num(w) * 255.0).astype(np.uint8)


def save_reliability_png(weights, path):
    Image.fromarray(reliability_to_uint8(weights)).save(path)


def save_triptych(image, error, consistency, path, title: str = "", consistency_label: str = "consistency",
                  valid: Optional[np.ndarray] = None):
    """Image / |error| / consistency statistic side by side.

    Both heatmaps use a reversed grey scale so that darker areas mark larger
    error and lower consistency.
    """
    error = np.asarray(error, dtype=np.float64)
    if valid is not None:
        error = np.where(valid, error, np.nan)
    fig, axes = plt.subplots(1, 3, figsize=(10.5, 2.6), constrained_layout=True)
    axes[0].imshow(np.clip(image, 0, 1))
    axes[0].set_title("left image")
    im = axes[1].imshow(error, cmap="gray_r")
    axes[1].set_title("|error| (px)")
    fig.colorbar(im, ax=axes[1], shrink=0.8)
    im = axes[2].imshow(np.asarray(consistency), cmap="gray_r")
    axes[2].set_title(consistency_label)
    fig.colorbar(im, ax=axes[2], shrink=0.8)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    if title:
        fig.suptitle(title)
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_curves(records: Sequence[dict], key: str, path, by: str = "step", title: str = "",
                label: Optional[str] = None):
    xs = [r[by] for r in records if key in r]
    ys = [r[key] for r in records if key in r]
    fig, ax = plt.subplots(figsize=(5, 3.2), constrained_layout=True)
    ax.plot(xs, ys, lw=1, label=label)
    ax.set_xlabel(by)
    ax.set_ylabel(key)
    if title:
        ax.set_title(title)
    if label:
        ax.legend()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_ablation(rows: Sequence[dict], path, title: str = ""):
    """Bar chart of median EPE per configuration, per-seed values as dots."""
    names = [r["name"] for r in rows]
    med = [r["epe"] for r in rows]
    fig, ax = plt.subplots(figsize=(1.2 * len(rows) + 2, 3.2), constrained_layout=True)
    ax.bar(range(len(rows)), med, color="0.7")
    for i, r in enumerate(rows):
        pts = r.get("epe_all") or []
        ax.scatter([i] * len(pts), pts, color="k", s=10, zorder=3)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(names, rotation=20)
    ax.set_ylabel("EPE (px)")
    if title:
        ax.set_title(title)
    fig.savefig(path, dpi=100)
    plt.close(fig)


def ensure_dir(path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path
