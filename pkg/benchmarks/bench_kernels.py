"""Time the numba and numpy implementations of each kernel.

    python3 benchmarks/bench_kernels.py [--repeat N]

The first numba call compiles; it is excluded from the timings and reported
separately.
"""

import argparse
import time
import timeit

import numpy as np

from dcp import kernels


def _cases(rng):
    pred = (rng.random((64, 64)) < 0.5).astype(np.int64)
    gt = (rng.random((64, 64)) < 0.5).astype(np.int64)
    feats = rng.normal(size=(256, 64, 64))
    vec = rng.normal(size=256)
    label = rng.integers(0, 21, size=(64, 64)).astype(np.int64)
    conf = np.zeros((21, 21), np.int64)
    return {
        "divide": (pred, gt),
        "masked_pool": (feats, gt),
        "cosine": (feats, vec),
        "inter_union": (pred, gt),
        "confusion": (conf, label, pred, 3),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=50)
    args = p.parse_args(argv)
    cases = _cases(np.random.default_rng(0))
    print(f"{'kernel':<12} {'compile s':>10} {'numba ms':>10} {'numpy ms':>10} {'speed-up':>9}")
    for name, (loop, vec) in kernels.IMPLEMENTATIONS.items():
        inputs = cases[name]
        t0 = time.perf_counter()
        loop(*inputs)
        compile_s = time.perf_counter() - t0
        t_loop = min(timeit.repeat(lambda: loop(*inputs), number=1, repeat=args.repeat)) * 1e3
        t_vec = min(timeit.repeat(lambda: vec(*inputs), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<12} {compile_s:>10.2f} {t_loop:>10.3f} {t_vec:>10.3f} {t_vec / t_loop:>8.1f}x")


if __name__ == "__main__":
    main()
