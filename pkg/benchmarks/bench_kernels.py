"""Compiled vs pure-Python kernel timings.

    python benchmarks/bench_kernels.py [--repeat 5] [--csv out.csv]

Times each batched kernel on shapes typical of a 2D exponential-kernel
matrix (leaf size 64, rank 64) and one full H2 product, once per
available backend.
"""
import argparse
import csv
import sys
import time

import numpy as np

from h2kit import kernels
from h2kit.construct import ExponentialKernel, construct_h2
from h2kit.geometry import grid_points
from h2kit.matvec import h2_matvec


def best_of(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng):
    A = rng.standard_normal((1024, 64, 64))
    X = rng.standard_normal((1024, 64, 8))
    idx = rng.integers(0, 256, size=4096)
    src = rng.standard_normal((4096, 64, 8))
    grp = rng.integers(0, 20, size=4096)
    P = rng.standard_normal((512, 64, 2))
    Q = rng.standard_normal((512, 64, 2))
    M = construct_h2(grid_points(16384, 2), ExponentialKernel(0.1), m=64, eta=0.9, p=6)
    xv = rng.uniform(size=16384)
    return {
        "batched_tn 1024x64x64 nv=8": lambda: kernels.batched_tn(A, X),
        "batched_nn 1024x64x64 nv=8": lambda: kernels.batched_nn(A, X),
        "scatter_add_ordered 4096 blocks": lambda: kernels.scatter_add_ordered(np.zeros((256, 64, 8)), idx, src, grp),
        "pairwise_distance 512x64x64": lambda: kernels.pairwise_distance(P, Q),
        "h2_matvec N=16384": lambda: h2_matvec(M, xv),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--csv")
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    work = cases(rng)
    backends = kernels.available_backends()
    times = {}
    for b in backends:
        kernels.use_backend(b)
        for name, fn in work.items():
            fn()
            times[(name, b)] = best_of(fn, args.repeat)
    width = max(len(n) for n in work)
    print(f"{'kernel':<{width}}  " + "  ".join(f"{b:>10}" for b in backends) + "     speedup")
    rows = []
    for name in work:
        t = [times[(name, b)] for b in backends]
        speed = times[(name, "python")] / times[(name, "compiled")] if "compiled" in backends else float("nan")
        print(f"{name:<{width}}  " + "  ".join(f"{v * 1e3:8.2f}ms" for v in t) + f"  {speed:8.2f}x")
        rows.append([name] + [f"{v:.6e}" for v in t] + [f"{speed:.3f}"])
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["kernel"] + [f"{b}_seconds" for b in backends] + ["speedup"])
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
