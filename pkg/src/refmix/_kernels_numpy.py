"""Pure-numpy kernel implementations (fallback path).

Matrix products delegate to BLAS; reductions use numpy's pairwise summation.
Deterministic for a fixed numpy build, but the summation order inside
``matmul`` is whatever BLAS picks — the numba path is the one that pins
row-major left-to-right accumulation.
"""

from __future__ import annotations

import numpy as np


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a @ b


def softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def rms_norm_rows(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    scale = 1.0 / np.sqrt(np.mean(x * x, axis=1, keepdims=True) + eps)
    return x * scale * gain


def rope_apply(x: np.ndarray, angles: np.ndarray) -> np.ndarray:
    # angles: one rotation angle per (2j, 2j+1) channel pair.
    c = np.cos(angles)
    s = np.sin(angles)
    even = x[:, 0::2]
    odd = x[:, 1::2]
    out = np.empty_like(x)
    out[:, 0::2] = even * c - odd * s
    out[:, 1::2] = even * s + odd * c
    return out
