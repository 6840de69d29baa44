"""Hot resampling and histogram kernels.

Each kernel has a numba ``@njit`` implementation and a vectorized numpy
twin with identical semantics. The numba path is used when numba imports
cleanly and ``CRANISYNTH_DISABLE_JIT`` is unset (or ``0``); set it to ``1``
to force the numpy path. ``benchmarks/bench_kernels.py`` compares both.

Coordinate convention: an output voxel index ``o`` (depth, height, width)
samples the input at continuous index ``A @ o + b``.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLE = os.environ.get("CRANISYNTH_DISABLE_JIT", "0").strip().lower() not in ("", "0", "false", "no")

try:
    if _DISABLE:
        raise ImportError("jit disabled by CRANISYNTH_DISABLE_JIT")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised via env flag in a subprocess
    HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy reference path


def _source_coords(matrix, offset, out_shape):
    grid = np.indices(out_shape, dtype=np.float64).reshape(3, -1)
    return matrix @ grid + offset[:, None]


def warp_linear_numpy(data, matrix, offset, out_shape, cval=0.0, clamp=False):
    data = np.ascontiguousarray(data, dtype=np.float32)
    shape = np.array(data.shape)
    src = _source_coords(np.asarray(matrix, np.float64), np.asarray(offset, np.float64), out_shape)
    eps = 1e-6
    if clamp:
        src = np.clip(src, 0.0, (shape - 1)[:, None].astype(np.float64))
        inside = np.ones(src.shape[1], dtype=bool)
    else:
        inside = np.all((src >= -eps) & (src <= (shape - 1)[:, None] + eps), axis=0)
        src = np.clip(src, 0.0, (shape - 1)[:, None].astype(np.float64))
    base = np.floor(src).astype(np.int64)
    for ax in range(3):
        np.minimum(base[ax], max(shape[ax] - 2, 0), out=base[ax])
    frac = src - base
    out = np.zeros(src.shape[1], dtype=np.float64)
    for dz in (0, 1):
        wz = frac[0] if dz else 1.0 - frac[0]
        iz = np.minimum(base[0] + dz, shape[0] - 1)
        for dy in (0, 1):
            wy = frac[1] if dy else 1.0 - frac[1]
            iy = np.minimum(base[1] + dy, shape[1] - 1)
            for dx in (0, 1):
                wx = frac[2] if dx else 1.0 - frac[2]
                ix = np.minimum(base[2] + dx, shape[2] - 1)
                out += wz * wy * wx * data[iz, iy, ix]
    out[~inside] = cval
    return out.reshape(out_shape).astype(np.float32)


def warp_nearest_numpy(data, matrix, offset, out_shape, cval=0, clamp=False):
    data = np.ascontiguousarray(data)
    shape = np.array(data.shape)
    src = _source_coords(np.asarray(matrix, np.float64), np.asarray(offset, np.float64), out_shape)
    idx = np.floor(src + 0.5).astype(np.int64)
    if clamp:
        for ax in range(3):
            np.clip(idx[ax], 0, shape[ax] - 1, out=idx[ax])
        inside = np.ones(src.shape[1], dtype=bool)
    else:
        inside = np.all((idx >= 0) & (idx < shape[:, None]), axis=0)
        for ax in range(3):
            np.clip(idx[ax], 0, shape[ax] - 1, out=idx[ax])
    out = data[idx[0], idx[1], idx[2]].copy()
    out[~inside] = cval
    return out.reshape(out_shape)


def joint_histogram_numpy(a, b, mask, a_range, b_range, bins):
    """Joint histogram with linear (two-bin) weight splitting along each axis."""
    av = np.asarray(a, np.float64)[mask]
    bv = np.asarray(b, np.float64)[mask]
    hist = np.zeros((bins, bins), dtype=np.float64)
    if av.size == 0:
        return hist
    sa = (bins - 1) / max(a_range[1] - a_range[0], 1e-12)
    sb = (bins - 1) / max(b_range[1] - b_range[0], 1e-12)
    pa = np.clip((av - a_range[0]) * sa, 0.0, bins - 1)
    pb = np.clip((bv - b_range[0]) * sb, 0.0, bins - 1)
    ia = np.minimum(np.floor(pa).astype(np.int64), bins - 2)
    ib = np.minimum(np.floor(pb).astype(np.int64), bins - 2)
    fa = pa - ia
    fb = pb - ib
    np.add.at(hist, (ia, ib), (1 - fa) * (1 - fb))
    np.add.at(hist, (ia + 1, ib), fa * (1 - fb))
    np.add.at(hist, (ia, ib + 1), (1 - fa) * fb)
    np.add.at(hist, (ia + 1, ib + 1), fa * fb)
    return hist


# ---------------------------------------------------------------------------
# numba path

if HAVE_NUMBA:

    @njit(cache=True)
    def _warp_linear_jit(data, matrix, offset, out_shape, cval, clamp):
        nz, ny, nx = data.shape
        oz, oy, ox = out_shape
        out = np.empty((oz, oy, ox), dtype=np.float32)
        eps = 1e-6
        for i in range(oz):
            for j in range(oy):
                for k in range(ox):
                    z = matrix[0, 0] * i + matrix[0, 1] * j + matrix[0, 2] * k + offset[0]
                    y = matrix[1, 0] * i + matrix[1, 1] * j + matrix[1, 2] * k + offset[1]
                    x = matrix[2, 0] * i + matrix[2, 1] * j + matrix[2, 2] * k + offset[2]
                    if not clamp:
                        if (z < -eps or y < -eps or x < -eps or z > nz - 1 + eps
                                or y > ny - 1 + eps or x > nx - 1 + eps):
                            out[i, j, k] = cval
                            continue
                    z = min(max(z, 0.0), nz - 1.0)
                    y = min(max(y, 0.0), ny - 1.0)
                    x = min(max(x, 0.0), nx - 1.0)
                    z0 = min(int(np.floor(z)), max(nz - 2, 0))
                    y0 = min(int(np.floor(y)), max(ny - 2, 0))
                    x0 = min(int(np.floor(x)), max(nx - 2, 0))
                    fz = z - z0
                    fy = y - y0
                    fx = x - x0
                    z1 = min(z0 + 1, nz - 1)
                    y1 = min(y0 + 1, ny - 1)
                    x1 = min(x0 + 1, nx - 1)
                    acc = ((1 - fz) * ((1 - fy) * ((1 - fx) * data[z0, y0, x0] + fx * data[z0, y0, x1])
                                       + fy * ((1 - fx) * data[z0, y1, x0] + fx * data[z0, y1, x1]))
                           + fz * ((1 - fy) * ((1 - fx) * data[z1, y0, x0] + fx * data[z1, y0, x1])
                                   + fy * ((1 - fx) * data[z1, y1, x0] + fx * data[z1, y1, x1])))
                    out[i, j, k] = acc
        return out

    @njit(cache=True)
    def _warp_nearest_jit(data, matrix, offset, out_shape, cval, clamp):
        nz, ny, nx = data.shape
        oz, oy, ox = out_shape
        out = np.empty((oz, oy, ox), dtype=data.dtype)
        for i in range(oz):
            for j in range(oy):
                for k in range(ox):
                    z = int(np.floor(matrix[0, 0] * i + matrix[0, 1] * j + matrix[0, 2] * k + offset[0] + 0.5))
                    y = int(np.floor(matrix[1, 0] * i + matrix[1, 1] * j + matrix[1, 2] * k + offset[1] + 0.5))
                    x = int(np.floor(matrix[2, 0] * i + matrix[2, 1] * j + matrix[2, 2] * k + offset[2] + 0.5))
                    if clamp:
                        z = min(max(z, 0), nz - 1)
                        y = min(max(y, 0), ny - 1)
                        x = min(max(x, 0), nx - 1)
                    elif z < 0 or y < 0 or x < 0 or z >= nz or y >= ny or x >= nx:
                        out[i, j, k] = cval
                        continue
                    out[i, j, k] = data[z, y, x]
        return out

    @njit(cache=True)
    def _joint_histogram_jit(a, b, mask, a0, a1, b0, b1, bins):
        hist = np.zeros((bins, bins), dtype=np.float64)
        sa = (bins - 1) / max(a1 - a0, 1e-12)
        sb = (bins - 1) / max(b1 - b0, 1e-12)
        fa_ = a.ravel()
        fb_ = b.ravel()
        fm = mask.ravel()
        for n in range(fa_.size):
            if not fm[n]:
                continue
            pa = min(max((fa_[n] - a0) * sa, 0.0), bins - 1.0)
            pb = min(max((fb_[n] - b0) * sb, 0.0), bins - 1.0)
            ia = min(int(np.floor(pa)), bins - 2)
            ib = min(int(np.floor(pb)), bins - 2)
            wa = pa - ia
            wb = pb - ib
            hist[ia, ib] += (1 - wa) * (1 - wb)
            hist[ia + 1, ib] += wa * (1 - wb)
            hist[ia, ib + 1] += (1 - wa) * wb
            hist[ia + 1, ib + 1] += wa * wb
        return hist


def _prep(matrix, offset, out_shape):
    return (np.ascontiguousarray(matrix, dtype=np.float64),
            np.ascontiguousarray(offset, dtype=np.float64),
            tuple(int(s) for s in out_shape))


def warp_linear(data, matrix, offset, out_shape, cval=0.0, clamp=False):
    """Trilinear resampling of ``data`` onto ``out_shape``; returns float32."""
    matrix, offset, out_shape = _prep(matrix, offset, out_shape)
    if HAVE_NUMBA:
        return _warp_linear_jit(np.ascontiguousarray(data, dtype=np.float32), matrix, offset,
                                out_shape, np.float32(cval), bool(clamp))
    return warp_linear_numpy(data, matrix, offset, out_shape, cval, clamp)


def warp_nearest(data, matrix, offset, out_shape, cval=0, clamp=False):
    """Nearest-neighbour resampling; output keeps the input dtype."""
    matrix, offset, out_shape = _prep(matrix, offset, out_shape)
    data = np.ascontiguousarray(data)
    if HAVE_NUMBA:
        return _warp_nearest_jit(data, matrix, offset, out_shape, data.dtype.type(cval), bool(clamp))
    return warp_nearest_numpy(data, matrix, offset, out_shape, cval, clamp)


def joint_histogram(a, b, mask, a_range, b_range, bins=32):
    if HAVE_NUMBA:
        return _joint_histogram_jit(np.ascontiguousarray(a, dtype=np.float64),
                                    np.ascontiguousarray(b, dtype=np.float64),
                                    np.ascontiguousarray(mask, dtype=np.bool_),
                                    float(a_range[0]), float(a_range[1]),
                                    float(b_range[0]), float(b_range[1]), int(bins))
    return joint_histogram_numpy(a, b, np.asarray(mask, bool), a_range, b_range, bins)
