"""Numba-compiled kernels (default path).

Explicit loops so the accumulation order is fixed: row-major, summing
left-to-right. No fastmath — results must be bit-reproducible.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.empty((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


@njit(cache=True)
def softmax_rows(x):
    m, n = x.shape
    out = np.empty((m, n), dtype=np.float64)
    for i in range(m):
        hi = x[i, 0]
        for j in range(1, n):
            if x[i, j] > hi:
                hi = x[i, j]
        total = 0.0
        for j in range(n):
            e = np.exp(x[i, j] - hi)
            out[i, j] = e
            total += e
        for j in range(n):
            out[i, j] /= total
    return out


@njit(cache=True)
def rms_norm_rows(x, gain, eps):
    m, n = x.shape
    out = np.empty((m, n), dtype=np.float64)
    for i in range(m):
        acc = 0.0
        for j in range(n):
            acc += x[i, j] * x[i, j]
        scale = 1.0 / np.sqrt(acc / n + eps)
        for j in range(n):
            out[i, j] = x[i, j] * scale * gain[j]
    return out


@njit(cache=True)
def rope_apply(x, angles):
    m, n = x.shape
    out = np.empty((m, n), dtype=np.float64)
    for i in range(m):
        for p in range(n // 2):
            c = np.cos(angles[i, p])
            s = np.sin(angles[i, p])
            a = x[i, 2 * p]
            b = x[i, 2 * p + 1]
            out[i, 2 * p] = a * c - b * s
            out[i, 2 * p + 1] = a * s + b * c
    return out
