"""Forward and backward timing of the compiled and numpy rasterizer backends.

    python benchmarks/bench_rasterizer.py [--gaussians 3000] [--size 128] [--repeats 3]
"""

import argparse
import time

import numpy as np

from onlinesplat.core import GaussianMap, Intrinsics, Pose, quat_normalize
from onlinesplat.rasterizer import available_backends, backward_from_context, render_with_context


def scene(n, seed=0):
    rng = np.random.default_rng(seed)
    m = GaussianMap()
    m.keyframe_anchors[0] = Pose.identity()
    m.add(rng.uniform([-1.5, -1.5, 2.5], [1.5, 1.5, 5.0], (n, 3)), rng.uniform(0, 1, (n, 3)),
          rng.uniform(0.02, 0.15, (n, 3)), rng.uniform(0.2, 0.9, n), 0,
          quats=quat_normalize(rng.normal(size=(n, 4))), betas=rng.uniform(0.7, 2.5, n))
    return m


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--gaussians", type=int, default=3000)
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()
    m = scene(args.gaussians)
    intr = Intrinsics.from_fov(args.size, args.size)
    dC = np.ones((args.size, args.size, 3))
    dD = np.ones((args.size, args.size))
    rows = {}
    for be in available_backends():
        fwd = best_of(lambda: render_with_context(m, Pose(), intr, backend=be), args.repeats)
        _, ctx = render_with_context(m, Pose(), intr, backend=be)
        bwd = best_of(lambda: backward_from_context(m, ctx, dC, dD, accumulate=False), args.repeats)
        rows[be] = (fwd, bwd)
        print(f"{be:8s} forward {fwd * 1e3:9.1f} ms   backward {bwd * 1e3:9.1f} ms")
    if "cython" in rows and "python" in rows:
        (f0, b0), (f1, b1) = rows["cython"], rows["python"]
        print(f"speedup  forward {f1 / f0:6.1f}x      backward {b1 / b0:6.1f}x")


if __name__ == "__main__":
    main()
