"""Compare the compiled nearest-neighbor kernels against the numpy fallback.

Usage: python bench/bench_kernels.py [--sizes 256,1024,2048] [--repeats 5]
"""

import argparse
import time

import numpy as np

from pcdistill import _kernels_py

try:
    from pcdistill import _kernels
except ImportError:
    _kernels = None


def _time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--sizes", default="256,1024,2048")
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--k", type=int, default=4)
    args = ap.parse_args()
    sizes = [int(s) for s in args.sizes.split(",")]

    if _kernels is None:
        print("compiled extension not built; showing fallback only")
    print(f"{'n':>6} {'op':<14} {'numpy [ms]':>12} {'cython [ms]':>12} {'speedup':>8}")
    rng = np.random.default_rng(0)
    for n in sizes:
        a = rng.normal(size=(n, 3))
        b = rng.normal(size=(n, 3))
        for op, call in (
            ("nn1", lambda m: m.nn1(a, b)),
            (f"knn(k={args.k})", lambda m: m.knn(a, b, args.k)),
            ("chamfer_sums", lambda m: m.chamfer_sums(a, b)),
        ):
            t_py = _time(lambda: call(_kernels_py), args.repeats)
            if _kernels is not None:
                t_cy = _time(lambda: call(_kernels), args.repeats)
                print(f"{n:>6} {op:<14} {t_py * 1e3:>12.3f} {t_cy * 1e3:>12.3f} "
                      f"{t_py / t_cy:>7.2f}x")
            else:
                print(f"{n:>6} {op:<14} {t_py * 1e3:>12.3f} {'-':>12} {'-':>8}")


if __name__ == "__main__":
    main()
