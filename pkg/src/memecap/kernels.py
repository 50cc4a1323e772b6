"""Hot numeric kernels with numba-jitted and pure-numpy implementations.

The jitted path is the default whenever numba imports cleanly. Setting the
environment variable ``MEMECAP_NUMBA=0`` before import selects the pure-numpy
fallback (useful on platforms where LLVM JIT is unavailable and for the
benchmark in ``benchmarks/bench_kernels.py``). Both paths agree to float64
round-off; they are not guaranteed bit-identical because BLAS and loop
summation orders differ.
"""

from __future__ import annotations

import os

import numpy as np

_WANT_NUMBA = os.environ.get("MEMECAP_NUMBA", "1") != "0"

if _WANT_NUMBA:
    try:
        from numba import njit

        _HAVE_NUMBA = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        _HAVE_NUMBA = False
else:
    _HAVE_NUMBA = False


def numba_enabled() -> bool:
    """True when the jitted kernel path is active."""
    return _HAVE_NUMBA


# ---------------------------------------------------------------------------
# pure-numpy reference implementations
# ---------------------------------------------------------------------------


def row_softmax_np(scores: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-shift; rows of the result sum to 1."""
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def lcs_length_np(a: np.ndarray, b: np.ndarray) -> int:
    """Length of the longest common subsequence of two int sequences."""
    n, m = a.shape[0], b.shape[0]
    prev = np.zeros(m + 1, dtype=np.int64)
    cur = np.zeros(m + 1, dtype=np.int64)
    for i in range(n):
        cur[1:] = prev[1:]
        hit = a[i] == b
        cur[1:][hit] = prev[:-1][hit] + 1
        np.maximum(cur[1:], prev[1:], out=cur[1:])
        np.maximum.accumulate(cur, out=cur)
        prev, cur = cur, prev
    return int(prev[m])


def band_stds_np(plane: np.ndarray, axis: int) -> np.ndarray:
    """Per-row (axis=0) or per-column (axis=1) pixel standard deviation."""
    other = 1 - axis
    return plane.std(axis=other)


# ---------------------------------------------------------------------------
# numba-jitted implementations
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:

    @njit(cache=True)
    def _row_softmax_nb(scores):
        n, m = scores.shape
        out = np.empty((n, m), dtype=np.float64)
        for i in range(n):
            mx = scores[i, 0]
            for j in range(1, m):
                if scores[i, j] > mx:
                    mx = scores[i, j]
            z = 0.0
            for j in range(m):
                v = np.exp(scores[i, j] - mx)
                out[i, j] = v
                z += v
            for j in range(m):
                out[i, j] /= z
        return out

    @njit(cache=True)
    def _lcs_length_nb(a, b):
        n, m = a.shape[0], b.shape[0]
        dp = np.zeros((n + 1, m + 1), dtype=np.int64)
        for i in range(n):
            for j in range(m):
                if a[i] == b[j]:
                    dp[i + 1, j + 1] = dp[i, j] + 1
                elif dp[i, j + 1] >= dp[i + 1, j]:
                    dp[i + 1, j + 1] = dp[i, j + 1]
                else:
                    dp[i + 1, j + 1] = dp[i + 1, j]
        return dp[n, m]

    @njit(cache=True)
    def _band_stds_nb(plane, axis):
        h, w = plane.shape
        n = h if axis == 0 else w
        k = w if axis == 0 else h
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            s = 0.0
            for j in range(k):
                s += plane[i, j] if axis == 0 else plane[j, i]
            mu = s / k
            acc = 0.0
            for j in range(k):
                v = (plane[i, j] if axis == 0 else plane[j, i]) - mu
                acc += v * v
            out[i] = np.sqrt(acc / k)
        return out


def row_softmax(scores: np.ndarray) -> np.ndarray:
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    if _HAVE_NUMBA:
        return _row_softmax_nb(scores)
    return row_softmax_np(scores)


def lcs_length(a: np.ndarray, b: np.ndarray) -> int:
    a = np.ascontiguousarray(a, dtype=np.int64)
    b = np.ascontiguousarray(b, dtype=np.int64)
    if a.size == 0 or b.size == 0:
        return 0
    if _HAVE_NUMBA:
        return int(_lcs_length_nb(a, b))
    return lcs_length_np(a, b)


def band_stds(plane: np.ndarray, axis: int) -> np.ndarray:
    plane = np.ascontiguousarray(plane, dtype=np.float64)
    if _HAVE_NUMBA:
        return _band_stds_nb(plane, axis)
    return band_stds_np(plane, axis)
