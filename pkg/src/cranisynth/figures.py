"""Static slice grids and suture-heatmap overlays (PNG, matplotlib Agg backend)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

VIEWS = ("axial", "coronal", "sagittal")


def _slice(arr, view):
    d, h, w = arr.shape
    if view == "axial":
        return arr[d // 2]
    if view == "coronal":
        return arr[:, h // 2]
    return arr[:, :, w // 2]


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def slice_grid(path, panels, title=""):
    """One row per view, one column per named panel; ``panels`` maps name -> (array, cmap, vmin, vmax)."""
    plt = _plt()
    names = list(panels)
    fig, axes = plt.subplots(len(VIEWS), len(names), figsize=(2.2 * len(names), 2.2 * len(VIEWS)), squeeze=False)
    for i, view in enumerate(VIEWS):
        for j, name in enumerate(names):
            arr, cmap, vmin, vmax = panels[name]
            ax = axes[i, j]
            ax.imshow(_slice(arr, view), cmap=cmap, vmin=vmin, vmax=vmax, origin="lower", interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(name, fontsize=8)
            if j == 0:
                ax.set_ylabel(view, fontsize=8)
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=80)
    plt.close(fig)


def heatmap_overlay(path, image, heatmap, title=""):
    plt = _plt()
    fig, axes = plt.subplots(1, len(VIEWS), figsize=(2.4 * len(VIEWS), 2.6), squeeze=False)
    for j, view in enumerate(VIEWS):
        ax = axes[0, j]
        ax.imshow(_slice(image, view), cmap="gray", vmin=0, vmax=1, origin="lower")
        heat = np.ma.masked_less(_slice(heatmap, view), 0.05)
        ax.imshow(heat, cmap="hot", vmin=0, vmax=1, alpha=0.7, origin="lower")
        ax.set_title(view, fontsize=8)
        ax.set_xticks([])
        ax.set_yticks([])
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=80)
    plt.close(fig)


def render_subject(directory, rec, sct, probs, pred):
    """Slice grid (MRI, CT, sCT, labels, prediction) and suture-heatmap overlay for one subject."""
    directory = Path(directory)
    sid = rec.subject_id
    slice_grid(directory / f"{sid}_slices.png", {
        "MRI": (rec.mri.data, "gray", 0, float(max(rec.mri.data.max(), 1e-6))),
        "CT": (rec.ct.data, "gray", 0, 1),
        "sCT": (sct.data, "gray", 0, 1),
        "labels": (rec.labels.data, "tab10", 0, 9),
        "predicted": (pred.data, "tab10", 0, 9),
    }, title=sid)
    heatmap_overlay(directory / f"{sid}_suture_heatmap.png", sct.data, probs.suture_heatmap, title=f"{sid} suture")
