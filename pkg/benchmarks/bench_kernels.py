#!/usr/bin/env python3
"""Benchmark the jitted kernels against their pure-numpy fallbacks.

Run directly: python benchmarks/bench_kernels.py [--repeats N]
The fallback path is what you get with MEMECAP_NUMBA=0; here both
implementations are timed in-process and checked for agreement.
"""

import argparse
import time

import numpy as np

from memecap import kernels


def time_fn(fn, *args, repeats=5):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - start)
    return best


def bench_row_softmax(repeats):
    rng = np.random.default_rng(0)
    scores = rng.normal(size=(2000, 400))
    if kernels.numba_enabled():
        kernels.row_softmax(scores[:2])  # compile outside the timing loop
    t_np = time_fn(kernels.row_softmax_np, scores, repeats=repeats)
    t_nb = time_fn(kernels.row_softmax, scores, repeats=repeats)
    agree = np.abs(kernels.row_softmax(scores) - kernels.row_softmax_np(scores)).max()
    return t_np, t_nb, agree


def bench_lcs(repeats):
    rng = np.random.default_rng(1)
    a = rng.integers(0, 50, size=1500)
    b = rng.integers(0, 50, size=1500)
    if kernels.numba_enabled():
        kernels.lcs_length(a[:4], b[:4])
    t_np = time_fn(kernels.lcs_length_np, a, b, repeats=repeats)
    t_nb = time_fn(kernels.lcs_length, a, b, repeats=repeats)
    agree = abs(kernels.lcs_length(a, b) - kernels.lcs_length_np(a, b))
    return t_np, t_nb, agree


def bench_band_stds(repeats):
    rng = np.random.default_rng(2)
    plane = rng.integers(0, 256, size=(3000, 2000)).astype(np.float64)
    if kernels.numba_enabled():
        kernels.band_stds(plane[:4, :4], 0)
    t_np = time_fn(kernels.band_stds_np, plane, 0, repeats=repeats)
    t_nb = time_fn(kernels.band_stds, plane, 0, repeats=repeats)
    agree = np.abs(kernels.band_stds(plane, 0) - kernels.band_stds_np(plane, 0)).max()
    return t_np, t_nb, agree


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    print(f"numba path enabled: {kernels.numba_enabled()}")
    print(f"{'kernel':<14} {'numpy':>10} {'jitted':>10} {'speedup':>8}  max dev")
    for name, bench in (
        ("row_softmax", bench_row_softmax),
        ("lcs_length", bench_lcs),
        ("band_stds", bench_band_stds),
    ):
        t_np, t_nb, agree = bench(args.repeats)
        print(f"{name:<14} {t_np * 1e3:>8.2f}ms {t_nb * 1e3:>8.2f}ms {t_np / t_nb:>7.1f}x  {agree:.2e}")


if __name__ == "__main__":
    main()
