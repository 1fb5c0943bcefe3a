#!/usr/bin/env python3
"""Benchmark the compiled conv kernel against the numpy im2col fallback.

Run after building the extension:
    python setup.py build_ext --inplace
    python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from neurofuscate.kernels import compiled_backend, numpy_backend

SHAPES = [
    # (filters, channels, kernel, hw, stride, pad)   â€” desk-scale model layers
    (8, 1, 3, 16, 1, 1),
    (8, 8, 3, 16, 1, 1),
    (16, 16, 3, 12, 1, 1),
    (64, 8, 3, 8, 1, 1),
    (32, 32, 5, 32, 1, 2),
]


def bench(fn, x, w, b, stride, pad, repeats=50):
    fn(x, w, b, stride, pad)  # warm-up
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn(x, w, b, stride, pad)
    return (time.perf_counter() - t0) / repeats


def main():
    rng = np.random.default_rng(0)
    print(f"{'shape':>28} {'numpy':>12} {'compiled':>12} {'speedup':>9}")
    for f, c, k, hw, stride, pad in SHAPES:
        x = rng.standard_normal((c, hw, hw)).astype(np.float32)
        w = rng.normal(0, 0.3, (f, c, k, k)).astype(np.float32)
        b = rng.normal(0, 0.1, f).astype(np.float32)
        t_np = bench(numpy_backend.conv2d_forward, x, w, b, stride, pad)
        label = f"f{f} c{c} k{k} hw{hw} s{stride}"
        if compiled_backend is None:
            print(f"{label:>28} {t_np * 1e6:>10.1f}us {'(not built)':>12}")
            continue
        t_cy = bench(compiled_backend.conv2d_forward, x, w, b, stride, pad)
        print(
            f"{label:>28} {t_np * 1e6:>10.1f}us {t_cy * 1e6:>10.1f}us "
            f"{t_np / t_cy:>8.2f}x"
        )
    if compiled_backend is None:
        print("\ncompiled kernel missing; showing numpy fallback only")


if __name__ == "__main__":
    main()
