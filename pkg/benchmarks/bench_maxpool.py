#!/usr/bin/env python3
"""Max-pool scan: numba-compiled path vs the pure-numpy fallback.

Run with ``python3 benchmarks/bench_maxpool.py``. Compilation happens in the
warmup calls and is excluded from the timings.
"""
import argparse
import time

import numpy as np

from poolleak import _kernels as K

PATHS = {
    "naive/numba": K.maxpool_naive_numba,
    "naive/numpy": K.maxpool_naive_numpy,
    "ct/numba": K.maxpool_ct_numba,
    "ct/numpy": K.maxpool_ct_numpy,
}


def bench(fn, x, reps, warmup=3):
    for _ in range(warmup):
        fn(x, 3, 3, 2)
    times = []
    for _ in range(reps):
        t = time.perf_counter_ns()
        fn(x, 3, 3, 2)
        times.append(time.perf_counter_ns() - t)
    return np.median(times) / 1e3


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--reps", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    # first- and second-pool inputs of the desk model, plus a CIFAR-sized plane
    shapes = [(32, 16, 16), (32, 7, 7), (32, 32, 32)]
    print(f"{'shape':>14} " + " ".join(f"{name:>12}" for name in PATHS) + "   (median us)")
    for shape in shapes:
        x = rng.standard_normal(shape).astype(np.float32)
        row = [bench(fn, x, args.reps) for fn in PATHS.values()]
        print(f"{str(shape):>14} " + " ".join(f"{v:12.1f}" for v in row))
        ref = K.maxpool_naive_numba(x, 3, 3, 2)
        for name, fn in PATHS.items():
            out, idx, _ = fn(x, 3, 3, 2)
            assert np.array_equal(out, ref[0]) and np.array_equal(idx, ref[1]), name
    print(f"active backend: {K.BACKEND}")


if __name__ == "__main__":
    main()
