"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--size 48] [--repeats 5]

Both paths run in this process: the numba one through the public wrappers,
the numpy one through the ``*_numpy`` functions. Reports the best of
``repeats`` wall times and the max absolute difference between outputs.
"""

import argparse
import time

import numpy as np
from scipy.spatial.transform import Rotation

from cranisynth import _kernels as K


def best_time(fn, repeats):
    out, best = None, float("inf")
    for _ in range(repeats):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=48)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    n = args.size
    shape = (n, n, n)
    vol = rng.random(shape, dtype=np.float32)
    labels = rng.integers(0, 9, shape).astype(np.uint8)
    matrix = Rotation.from_euler("XYZ", [4, -3, 6], degrees=True).as_matrix() * 1.05
    centre = (np.array(shape) - 1) / 2
    offset = centre - matrix @ centre + np.array([1.3, -0.7, 2.1])
    other = np.clip(vol + 0.1 * rng.standard_normal(shape), 0, 1)
    mask = np.ones(shape, bool)

    cases = [
        ("warp_linear", lambda: K.warp_linear(vol, matrix, offset, shape),
         lambda: K.warp_linear_numpy(vol, matrix, offset, shape)),
        ("warp_nearest", lambda: K.warp_nearest(labels, matrix, offset, shape),
         lambda: K.warp_nearest_numpy(labels, matrix, offset, shape)),
        ("joint_histogram", lambda: K.joint_histogram(vol, other, mask, (0, 1), (0, 1), 32),
         lambda: K.joint_histogram_numpy(vol, other, mask, (0, 1), (0, 1), 32)),
    ]
    print(f"backend {K.BACKEND}, grid {n}^3, best of {args.repeats}")
    print(f"{'kernel':<18}{'jit ms':>10}{'numpy ms':>10}{'speedup':>9}{'max diff':>11}")
    for name, fast, ref in cases:
        fast()  # compile outside the timed region
        t_fast, a = best_time(fast, args.repeats)
        t_ref, b = best_time(ref, args.repeats)
        diff = float(np.max(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64))))
        print(f"{name:<18}{1e3 * t_fast:>10.2f}{1e3 * t_ref:>10.2f}{t_ref / t_fast:>9.1f}{diff:>11.2e}")


if __name__ == "__main__":
    main()
