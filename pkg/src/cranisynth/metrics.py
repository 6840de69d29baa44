"""Image-similarity and segmentation-overlap metrics.

Intensity metrics assume a dynamic range of 1. FID and the LPIPS-style
distance use the seed-frozen feature stack from :mod:`cranisynth.models`, so
their absolute values are only comparable with other runs of this package.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ArgumentError, UndefinedDistanceError
from .volume import BONE_LABELS, SUTURE_LABEL

DATA_RANGE = 1.0
SSIM_SIGMA = 1.5
SSIM_RADIUS = 3
PSNR_INF = math.inf
LABELS = tuple(range(1, 9))


def _data(x):
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ArgumentError(f"shape mismatch: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# intensity metrics


def ssim(a, b, data_range=DATA_RANGE):
    """Mean SSIM over interior voxels with a 7-voxel Gaussian window (sigma 1.5)."""
    x, y = _data(a), _data(b)
    _same_shape(x, y)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    filt = lambda img: ndimage.gaussian_filter(img, SSIM_SIGMA, truncate=SSIM_RADIUS / SSIM_SIGMA, mode="reflect")
    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx * mx
    vy = filt(y * y) - my * my
    cxy = filt(x * y) - mx * my
    smap = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    r = SSIM_RADIUS
    inner = smap[r:-r, r:-r, r:-r] if min(smap.shape) > 2 * r else smap
    return float(inner.mean())


def psnr_mae(a, b, data_range=DATA_RANGE):
    """(PSNR in dB, mean absolute error); identical inputs give (inf, 0)."""
    x, y = _data(a), _data(b)
    _same_shape(x, y)
    diff = x - y
    mse = float(np.mean(diff * diff))
    mae = float(np.mean(np.abs(diff)))
    psnr = PSNR_INF if mse == 0 else 10.0 * math.log10(data_range ** 2 / mse)
    return psnr, mae


def fid_from_moments(mu_a, cov_a, mu_b, cov_b):
    mu_a, mu_b = np.atleast_1d(mu_a).astype(np.float64), np.atleast_1d(mu_b).astype(np.float64)
    cov_a, cov_b = np.atleast_2d(cov_a).astype(np.float64), np.atleast_2d(cov_b).astype(np.float64)
    w, v = np.linalg.eigh(cov_a)
    root_a = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
    inner = root_a @ cov_b @ root_a
    lam = np.clip(np.linalg.eigvalsh((inner + inner.T) / 2.0), 0.0, None)
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.sum(np.sqrt(lam)))


def fid(features_a, features_b):
    """Fréchet distance between two sets of feature vectors (rows)."""
    fa = np.atleast_2d(np.asarray(features_a, dtype=np.float64))
    fb = np.atleast_2d(np.asarray(features_b, dtype=np.float64))
    if fa.shape[0] < 2 or fb.shape[0] < 2:
        raise ArgumentError("each feature set needs at least two vectors")
    if fa.shape[1] != fb.shape[1]:
        raise ArgumentError(f"feature dimensions differ: {fa.shape[1]} vs {fb.shape[1]}")
    cov = lambda f: np.atleast_2d(np.cov(f, rowvar=False))
    return fid_from_moments(fa.mean(axis=0), cov(fa), fb.mean(axis=0), cov(fb))


def patch_features(v, grid=4, seed=0):
    """Deepest frozen-stack activation pooled onto a ``grid``^3 lattice of patches; rows are patches."""
    import torch
    from .models.api import volume_features

    deep = volume_features(v, seed)[-1]
    pooled = torch.nn.functional.adaptive_avg_pool3d(deep[None], grid)[0]
    return pooled.reshape(pooled.shape[0], -1).T.double().numpy()


def perceptual_distance(a, b, seed=0):
    """Channel-normalized squared feature differences, averaged over the frozen stack's layers."""
    from .models.api import volume_features
    from .models.losses import channel_normalized_distance

    _same_shape(_data(a), _data(b))
    fa = [f[None] for f in volume_features(a, seed)]
    fb = [f[None] for f in volume_features(b, seed)]
    return float(channel_normalized_distance(fa, fb))


# ---------------------------------------------------------------------------
# overlap and surface distance


def _labels(x):
    return np.asarray(getattr(x, "data", x))


def dice_per_label(pred, gt, labels=LABELS):
    """Dice per code; 1.0 when a code is absent from both, 0.0 when absent from one."""
    p, g = _labels(pred), _labels(gt)
    _same_shape(p, g)
    out = {}
    for c in labels:
        pm, gm = p == c, g == c
        sp, sg = int(pm.sum()), int(gm.sum())
        if sp == 0 and sg == 0:
            out[c] = 1.0
        elif sp == 0 or sg == 0:
            out[c] = 0.0
        else:
            out[c] = 2.0 * int(np.logical_and(pm, gm).sum()) / (sp + sg)
    return out


_FACE = ndimage.generate_binary_structure(3, 1)


def boundary(mask):
    """Foreground voxels with a 6-neighbour in the background (grid edge counts as background)."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_FACE, border_value=0)


def surface_distances(a, b, spacing):
    """Distances from each boundary voxel of ``a`` to the nearest boundary voxel of ``b`` (mm)."""
    ba, bb = boundary(a), boundary(b)
    dist_to_b = ndimage.distance_transform_edt(~bb, sampling=spacing)
    return dist_to_b[ba]


def hd95(pred, gt, label, spacing=None):
    """95th percentile of the pooled symmetric boundary distances for ``label`` (mm)."""
    p, g = _labels(pred), _labels(gt)
    _same_shape(p, g)
    if spacing is None:
        spacing = getattr(gt, "spacing_mm", (1.0, 1.0, 1.0))
    pm, gm = p == label, g == label
    if not pm.any() or not gm.any():
        raise UndefinedDistanceError(f"label {label} is empty in {'prediction' if not pm.any() else 'ground truth'}")
    pooled = np.concatenate([surface_distances(pm, gm, spacing), surface_distances(gm, pm, spacing)])
    return float(np.percentile(pooled, 95))


# ---------------------------------------------------------------------------
# reports

CSV_COLUMNS = (
    ["subject_id", "age_days", "sex", "fid", "ssim", "lpips_proxy", "psnr_db", "mae"]
    + [f"dice_{c}" for c in LABELS]
    + [f"hd95_mm_{c}" for c in LABELS]
    + ["mean_dice", "mean_hd95_mm"]
)


def segmentation_scores(pred, gt):
    dice = dice_per_label(pred, gt)
    hd = {}
    for c in LABELS:
        try:
            hd[c] = hd95(pred, gt, c)
        except UndefinedDistanceError:
            hd[c] = None
    bone_hd = [hd[c] for c in BONE_LABELS if hd[c] is not None]
    return {
        "dice": dice,
        "hd95_mm": hd,
        "mean_dice": float(np.mean([dice[c] for c in BONE_LABELS])),
        "mean_hd95_mm": float(np.mean(bone_hd)) if bone_hd else None,
    }


def image_scores(sct, ct, seed=0):
    psnr, mae = psnr_mae(sct, ct)
    return {
        "fid": fid(patch_features(sct, seed=seed), patch_features(ct, seed=seed)),
        "ssim": ssim(sct, ct),
        "lpips_proxy": perceptual_distance(sct, ct, seed),
        "psnr_db": psnr,
        "mae": mae,
    }


@dataclass
class MetricsReport:
    """Per-subject entries plus cohort mean/std of every scalar."""

    subjects: list = field(default_factory=list)
    cohort_fid: float | None = None

    def add(self, entry):
        self.subjects.append(entry)

    def flat_rows(self):
        rows = []
        for s in sorted(self.subjects, key=lambda e: e["subject_id"]):
            row = {k: s.get(k) for k in ("subject_id", "age_days", "sex", "fid", "ssim", "lpips_proxy", "psnr_db", "mae")}
            for c in LABELS:
                row[f"dice_{c}"] = s["dice"][c]
                row[f"hd95_mm_{c}"] = s["hd95_mm"][c]
            row["mean_dice"] = s["mean_dice"]
            row["mean_hd95_mm"] = s["mean_hd95_mm"]
            rows.append(row)
        return rows

    def aggregate(self):
        rows = self.flat_rows()
        agg = {}
        for col in CSV_COLUMNS[3:]:
            vals = [r[col] for r in rows if r[col] is not None and math.isfinite(r[col])]
            agg[col] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "n": len(vals)} if vals else None
        if self.cohort_fid is not None:
            agg["cohort_fid"] = self.cohort_fid
        return agg

    def to_json(self):
        return {"subjects": self.flat_rows(), "aggregate": self.aggregate()}

    def write(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "metrics.json").write_text(json.dumps(_finite(self.to_json()), indent=1, sort_keys=True))
        with open(directory / "metrics.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            for row in self.flat_rows():
                writer.writerow({k: _csv_cell(row[k]) for k in CSV_COLUMNS})


def _finite(obj):
    """JSON-safe copy: infinities become the string "inf", floats are rounded to 10 significant digits."""
    if isinstance(obj, dict):
        return {str(k): _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        return float(f"{float(obj):.10g}")
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _csv_cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    return v


def read_metrics_csv(path):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(CSV_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise ArgumentError(f"{path}: missing columns {sorted(missing)}")
        for raw in reader:
            row = {"subject_id": raw["subject_id"], "sex": raw["sex"], "age_days": int(raw["age_days"])}
            for col in CSV_COLUMNS[3:]:
                cell = raw[col]
                row[col] = None if cell == "" else float(cell)
            rows.append(row)
    return rows


__all__ = [
    "CSV_COLUMNS", "MetricsReport", "boundary", "dice_per_label", "fid", "fid_from_moments", "hd95",
    "image_scores", "patch_features", "perceptual_distance", "psnr_mae", "read_metrics_csv",
    "segmentation_scores", "ssim", "surface_distances", "SUTURE_LABEL",
]
