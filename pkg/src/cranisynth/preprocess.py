"""CT bed removal, MRI bias-field correction, and similarity registration.

Transforms act on physical coordinates (mm) measured from the grid centre,
axes ordered (z, y, x) = (depth, height, width). A transform maps a point
``p`` of the moving volume to ``R @ (scale * p) + translation`` where
``R = Rz @ Ry @ Rx`` (Z-Y-X Euler angles, right-handed about the first,
second and third array axes respectively).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from . import _kernels
from .errors import ArgumentError, DomainError, EmptyForegroundError
from .volume import LabelMap, MIN_AXIS, Modality, SubjectRecord, Volume, resample

log = logging.getLogger(__name__)

MODES = ("rigid6", "similarity9")
METRICS = ("mse", "mutual_information")
MI_BINS = 32
PYRAMID_LEVELS = 3
EVALS_PER_LEVEL = 200
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


# ---------------------------------------------------------------------------
# transforms


@dataclass
class SimilarityTransform:
    rotation: tuple = (0.0, 0.0, 0.0)
    translation: tuple = (0.0, 0.0, 0.0)
    scale: tuple = (1.0, 1.0, 1.0)
    mode: str = "similarity9"
    metric: str | None = None
    converged: bool = True
    metric_value: float | None = None
    history: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.rotation = tuple(float(a) for a in self.rotation)
        self.translation = tuple(float(a) for a in self.translation)
        self.scale = tuple(float(a) for a in self.scale)
        if self.mode not in MODES:
            raise ArgumentError(f"mode must be one of {MODES}")
        if any(s <= 0 for s in self.scale):
            raise ArgumentError("scale factors must be positive")
        if self.mode == "rigid6" and self.scale != (1.0, 1.0, 1.0):
            raise ArgumentError("rigid transforms carry unit scale")

    @classmethod
    def identity(cls, mode="similarity9"):
        return cls(mode=mode)

    @classmethod
    def from_params(cls, params, mode):
        params = np.asarray(params, dtype=np.float64)
        scale = tuple(params[6:9]) if mode == "similarity9" else (1.0, 1.0, 1.0)
        return cls(tuple(params[0:3]), tuple(params[3:6]), scale, mode=mode)

    def params(self):
        p = list(self.rotation) + list(self.translation)
        if self.mode == "similarity9":
            p += list(self.scale)
        return np.array(p, dtype=np.float64)

    def rotation_matrix(self):
        return rotation_matrix(self.rotation)

    def linear(self):
        return self.rotation_matrix() @ np.diag(self.scale)

    def matrix(self):
        """4x4 homogeneous matrix acting on (z, y, x, 1) in mm about the grid centre."""
        m = np.eye(4)
        m[:3, :3] = self.linear()
        m[:3, 3] = self.translation
        return m

    @classmethod
    def from_matrix(cls, m, mode="similarity9", tol=1e-9):
        lin = np.asarray(m, dtype=np.float64)[:3, :3]
        scale = np.linalg.norm(lin, axis=0)
        rot = lin / scale
        if np.abs(rot.T @ rot - np.eye(3)).max() > 1e-7 or np.linalg.det(rot) < 0:
            raise ArgumentError("matrix is not a rotation times an axis scaling")
        if mode == "rigid6":
            if np.abs(scale - 1.0).max() > 1e-7:
                raise ArgumentError("matrix carries a scale; cannot be represented as rigid6")
            scale = np.ones(3)
        angles = Rotation.from_matrix(rot).as_euler("XYZ")
        return cls(tuple(angles), tuple(np.asarray(m)[:3, 3]), tuple(scale), mode=mode)

    def compose(self, other):
        """Transform applying ``other`` first, then ``self``."""
        mode = "rigid6" if self.mode == other.mode == "rigid6" else "similarity9"
        return SimilarityTransform.from_matrix(self.matrix() @ other.matrix(), mode=mode)

    def inverse(self):
        if max(self.scale) - min(self.scale) > 1e-12:
            raise ArgumentError("inverse of an anisotropic scaling is not a SimilarityTransform")
        return SimilarityTransform.from_matrix(np.linalg.inv(self.matrix()), mode=self.mode)

    def to_dict(self):
        return {
            "rotation": list(self.rotation),
            "translation_mm": list(self.translation),
            "scale": list(self.scale),
            "mode": self.mode,
            "metric": self.metric,
            "converged": bool(self.converged),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["rotation"], d["translation_mm"], d["scale"], mode=d["mode"],
                   metric=d.get("metric"), converged=d.get("converged", True))


def rotation_matrix(angles):
    """Z-Y-X Euler rotation on (z, y, x) coordinates: ``Rz(a0) @ Ry(a1) @ Rx(a2)``."""
    return Rotation.from_euler("XYZ", np.asarray(angles, dtype=np.float64)).as_matrix()


def _index_map(t, shape, spacing):
    """Affine (matrix, offset) from output voxel index to moving voxel index."""
    d = np.diag(spacing)
    d_inv = np.diag(1.0 / np.asarray(spacing))
    centre = (np.asarray(shape, dtype=np.float64) - 1.0) / 2.0
    inv_lin = np.linalg.inv(t.linear())
    a = d_inv @ inv_lin @ d
    offset = centre - a @ centre - d_inv @ inv_lin @ np.asarray(t.translation)
    return a, offset


def apply_transform(v, t):
    """Resample ``v`` through ``t`` about the grid centre; out-of-field voxels become 0."""
    a, offset = _index_map(t, v.shape, v.spacing_mm)
    if isinstance(v, LabelMap):
        return LabelMap(_kernels.warp_nearest(v.data, a, offset, v.shape, cval=0), v.spacing_mm)
    return Volume(_kernels.warp_linear(v.data, a, offset, v.shape, cval=0.0), v.spacing_mm, v.modality)


# ---------------------------------------------------------------------------
# bed removal and bias correction


def otsu_threshold(values, bins=256):
    values = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = values.min(), values.max()
    if hi <= lo:
        return float(lo)
    hist, edges = np.histogram(values, bins=bins, range=(lo, hi))
    centres = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    m0 = np.cumsum(hist * centres)
    mu0 = m0 / np.maximum(w0, 1)
    mu1 = (m0[-1] - m0) / np.maximum(w1, 1)
    between = (w0 * w1 * (mu0 - mu1) ** 2)[:-1]
    # empty bins between two modes give a plateau; take the middle of the first one
    top = np.flatnonzero(between >= between.max() * (1.0 - 1e-12))
    run = top[: 1 + int(np.argmax(np.diff(top) > 1)) if np.any(np.diff(top) > 1) else len(top)]
    return float(0.5 * (centres[run[0]] + centres[run[-1]] + (edges[1] - edges[0])))


def head_mask(v):
    """Voxels above the Otsu air/object threshold."""
    data = v.data if hasattr(v, "data") else np.asarray(v)
    if not np.any(data > 0):
        raise EmptyForegroundError("volume has no voxel above background")
    t = otsu_threshold(data)
    mask = data > t
    if not mask.any():
        mask = data > 0
    return mask


def remove_bed(ct):
    """Keep only the largest 26-connected foreground component of ``ct``."""
    mask = head_mask(ct)
    labels, n = ndimage.label(mask, structure=np.ones((3, 3, 3), dtype=bool))
    if n == 0:
        raise EmptyForegroundError("no foreground component")
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    keep = labels == int(np.argmax(sizes))
    # soft tissue under the threshold but enclosed by the head stays
    keep = ndimage.binary_fill_holes(keep)
    out = np.where(keep, ct.data, 0.0).astype(np.float32)
    return Volume(out, ct.spacing_mm, ct.modality)


def _poly_basis(shape, order, mask=None):
    axes = [np.linspace(-1.0, 1.0, n) for n in shape]
    zz, yy, xx = np.meshgrid(*axes, indexing="ij")
    if mask is not None:
        zz, yy, xx = zz[mask], yy[mask], xx[mask]
    else:
        zz, yy, xx = zz.ravel(), yy.ravel(), xx.ravel()
    cols = []
    for i in range(order + 1):
        for j in range(order + 1 - i):
            for k in range(order + 1 - i - j):
                cols.append(zz ** i * yy ** j * xx ** k)
    return np.stack(cols, axis=1)


def correct_bias(mri, order=3, mask=None):
    """Divide out a smooth multiplicative field.

    A degree-``order`` polynomial is least-squares fitted to log intensity
    over the foreground (``mask``, default the Otsu head mask), exponentiated
    and normalized to unit mean over the foreground.
    """
    if order < 0:
        raise ArgumentError("order must be non-negative")
    data = mri.data.astype(np.float64)
    if mask is None:
        mask = head_mask(mri)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyForegroundError("empty foreground mask")
    if np.any(data[mask] <= 0):
        raise DomainError("bias correction needs strictly positive foreground intensities")
    basis = _poly_basis(data.shape, order, mask)
    coef, *_ = np.linalg.lstsq(basis, np.log(data[mask]), rcond=None)
    log_field = (_poly_basis(data.shape, order) @ coef).reshape(data.shape)
    log_field -= log_field[mask].mean()
    bias = np.exp(log_field)
    bias /= bias[mask].mean()
    return Volume((data / bias).astype(np.float32), mri.spacing_mm, mri.modality)


# ---------------------------------------------------------------------------
# similarity metrics


def mutual_information(a, b, mask=None, bins=MI_BINS):
    """Mutual information (nats) from a linearly-binned joint histogram."""
    a = np.asarray(getattr(a, "data", a))
    b = np.asarray(getattr(b, "data", b))
    if a.shape != b.shape:
        raise ArgumentError("mutual_information needs equal shapes")
    if mask is None:
        mask = (a > 0) | (b > 0)
    return _mi_from_hist(_kernels.joint_histogram(a, b, mask, _range(a, mask), _range(b, mask), bins))


def _range(x, mask):
    vals = x[mask] if np.any(mask) else x.ravel()
    return float(vals.min()), float(vals.max())


def _mi_from_hist(hist):
    total = hist.sum()
    if total <= 0:
        return 0.0
    p = hist / total
    pa = p.sum(axis=1, keepdims=True)
    pb = p.sum(axis=0, keepdims=True)
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / (pa @ pb)[nz])))


class _Objective:
    """Cost of a parameter vector at one pyramid level (lower is better)."""

    def __init__(self, moving, fixed, mode, metric):
        self.moving = moving
        self.fixed = fixed
        self.mode = mode
        self.metric = metric
        self.evals = 0
        if metric == "mutual_information":
            self.mask = fixed.data > 1e-6
            if not self.mask.any():
                self.mask = np.ones(fixed.shape, dtype=bool)
            self.fixed_range = _range(fixed.data, self.mask)
            self.moving_range = (float(moving.data.min()), float(moving.data.max()))

    def __call__(self, params):
        self.evals += 1
        t = SimilarityTransform.from_params(params, self.mode)
        a, offset = _index_map(t, self.moving.shape, self.moving.spacing_mm)
        warped = _kernels.warp_linear(self.moving.data, a, offset, self.fixed.shape, cval=0.0)
        if self.metric == "mse":
            diff = warped.astype(np.float64) - self.fixed.data
            return float(np.mean(diff * diff))
        hist = _kernels.joint_histogram(warped, self.fixed.data, self.mask,
                                        self.moving_range, self.fixed_range, MI_BINS)
        return -_mi_from_hist(hist)


def _golden_section(f, x0, i, step, budget):
    """Minimize ``f`` along coordinate ``i`` within ``x0[i] +- step``."""
    lo, hi = x0[i] - step, x0[i] + step
    best_x, best_f = None, np.inf

    def at(val):
        x = x0.copy()
        x[i] = val
        return x

    c = hi - GOLDEN * (hi - lo)
    d = lo + GOLDEN * (hi - lo)
    fc, fd = f(at(c)), f(at(d))
    used = 2
    while used < budget:
        if fc < fd:
            hi, d, fd = d, c, fc
            c = hi - GOLDEN * (hi - lo)
            fc = f(at(c))
        else:
            lo, c, fc = c, d, fd
            d = lo + GOLDEN * (hi - lo)
            fd = f(at(d))
        used += 1
    for val, fv in ((c, fc), (d, fd)):
        if fv < best_f:
            best_x, best_f = val, fv
    return best_x, best_f, used


def _pyramid(v, levels):
    out = [v]
    for _ in range(levels - 1):
        prev = out[-1]
        target = tuple(max(MIN_AXIS, s // 2) for s in prev.shape)
        if target == prev.shape:
            out.append(prev)
            continue
        smooth = ndimage.gaussian_filter(prev.data, sigma=0.5)
        out.append(resample(Volume(smooth, prev.spacing_mm, prev.modality), target))
    return out[::-1]


def register(moving, fixed, mode="rigid6", metric="mse", levels=PYRAMID_LEVELS,
             evals_per_level=EVALS_PER_LEVEL, line_evals=8):
    """Estimate the transform that brings ``moving`` onto ``fixed``.

    Derivative-free coordinate descent with golden-section line searches over
    a coarse-to-fine pyramid. Apply the result with :func:`apply_transform`.
    """
    if mode not in MODES:
        raise ArgumentError(f"mode must be one of {MODES}")
    if metric not in METRICS:
        raise ArgumentError(f"metric must be one of {METRICS}")
    if moving.modality != fixed.modality and metric != "mutual_information":
        if {moving.modality, fixed.modality} != {Modality.CT, Modality.SCT}:
            raise ArgumentError("cross-modality registration requires mutual_information")
    if moving.shape != fixed.shape:
        raise ArgumentError(f"grid mismatch: moving {moving.shape} vs fixed {fixed.shape}")

    nparam = 9 if mode == "similarity9" else 6
    x = SimilarityTransform.identity(mode).params()
    mov_pyr, fix_pyr = _pyramid(moving, levels), _pyramid(fixed, levels)
    converged = True
    history = []
    for level, (mov, fix) in enumerate(zip(mov_pyr, fix_pyr)):
        f = _Objective(mov, fix, mode, metric)
        coarse = levels - 1 - level
        spacing = float(np.max(fix.spacing_mm))
        steps = np.array([0.12, 0.12, 0.12] + [3.0 * spacing] * 3 + [0.1] * 3)[:nparam]
        steps /= 2.0 ** (level * 0.5)
        fx = f(x)
        improved_any = False
        while f.evals < evals_per_level:
            improved = False
            for i in range(nparam):
                budget = min(line_evals, evals_per_level - f.evals)
                if budget < 2:
                    break
                xi, fi, _ = _golden_section(f, x, i, steps[i], budget)
                if xi is not None and fi < fx:
                    x[i], fx = xi, fi
                    improved = improved_any = True
            if not improved:
                steps *= 0.5
                if steps.max() < 1e-4:
                    break
        history.append({"level": level, "evals": f.evals, "cost": fx})
        if coarse == levels - 1 and not improved_any:
            converged = False
    full = _Objective(moving, fixed, mode, metric)
    ident = SimilarityTransform.identity(mode).params()
    final_cost, ident_cost = full(x), full(ident)
    if ident_cost < final_cost:
        x, final_cost = ident, ident_cost
    result = SimilarityTransform.from_params(x, mode)
    result.metric = metric
    result.converged = converged
    result.metric_value = final_cost
    result.history = history
    if not converged:
        log.warning("registration made no improving step at the coarsest level")
    return result


# ---------------------------------------------------------------------------
# subject-level preprocessing


def preprocess_subject(rec, reference_ct=None):
    """Bed removal, CT-to-reference rigid alignment, MRI bias correction and MRI-to-CT registration."""
    ct = remove_bed(rec.ct)
    labels = rec.labels
    ct_t = SimilarityTransform.identity("rigid6")
    if reference_ct is not None and reference_ct is not rec.ct:
        ct_t = register(ct, reference_ct, mode="rigid6", metric="mse")
        ct = apply_transform(ct, ct_t)
        labels = apply_transform(labels, ct_t)
    mri = correct_bias(rec.mri)
    mri_t = register(mri, ct, mode="similarity9", metric="mutual_information")
    mri = apply_transform(mri, mri_t)
    meta = dict(rec.meta)
    meta["ct_to_reference"] = ct_t.to_dict()
    meta["mri_to_ct"] = mri_t.to_dict()
    return SubjectRecord(rec.subject_id, rec.age_days, rec.sex, mri, ct, labels, meta)
