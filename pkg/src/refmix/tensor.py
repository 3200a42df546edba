"""Dense float64 math primitives and the seeded random stream.

Tensors are plain C-order ``numpy.ndarray`` objects with dtype float64;
``as_tensor`` is the single place that coerces. The hot kernels live in
the backend modules and are selected through :mod:`refmix.backend`.
"""

from __future__ import annotations

import numpy as np

from .backend import kernels
from .errors import ShapeError


def as_tensor(x, shape: tuple[int, ...] | None = None) -> np.ndarray:
    """Coerce to a C-contiguous float64 array, optionally checking shape."""
    arr = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    if shape is not None and arr.shape != shape:
        raise ShapeError(f"expected shape {shape}, got {arr.shape}")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a fixed, deterministic accumulation order."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return kernels().matmul(a, b)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction for stability."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] == 0:
        raise ShapeError(f"softmax_rows needs a 2-D input with nonempty rows, got {x.shape}")
    return kernels().softmax_rows(x)


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Scale each row to unit root-mean-square (plus eps), then apply gain."""
    x = np.asarray(x, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    if eps <= 0:
        raise ShapeError(f"rms_norm eps must be positive, got {eps}")
    if x.ndim != 2 or gain.shape != (x.shape[1],):
        raise ShapeError(f"rms_norm shapes inconsistent: x {x.shape}, gain {gain.shape}")
    return kernels().rms_norm_rows(x, gain, float(eps))


class SeededRng:
    """Counter-based random stream (Philox) with explicit splitting.

    A stream is identified by ``(seed, path)``. ``split`` hands out children
    at ``path + (0,)``, ``path + (1,)``, ...; ``child`` derives a stream at an
    explicit key, so item N of a batch job can be reproduced without drawing
    items 0..N-1 first. Use one mechanism per node, not both, or the counter
    and your keys may collide. Streams never alias their parent.
    """

    GENERATOR = "philox4x64/v1"

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if seed < 0:
            raise ValueError(f"seed must be a non-negative integer, got {seed}")
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        self._split_count = 0
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def split(self) -> "SeededRng":
        child = SeededRng(self.seed, self.path + (self._split_count,))
        self._split_count += 1
        return child

    def child(self, *key: int) -> "SeededRng":
        return SeededRng(self.seed, self.path + tuple(int(k) for k in key))

    def normal(self, shape) -> np.ndarray:
        if np.prod(shape) < 0 or len(tuple(np.atleast_1d(shape))) == 0:
            raise ValueError(f"shape must be nonempty, got {shape!r}")
        return self._gen.standard_normal(size=shape, dtype=np.float64)

    def uniform(self) -> float:
        return float(self._gen.random(dtype=np.float64))

    def integers(self, low: int, high: int) -> int:
        """Uniform integer in [low, high)."""
        return int(self._gen.integers(low, high))

    def choice_weighted(self, items, weights) -> object:
        """Pick one item with the given probabilities (cumulative-sum scan)."""
        if len(items) != len(weights) or not items:
            raise ValueError("items and weights must be nonempty and equal-length")
        u = self.uniform()
        acc = 0.0
        for item, w in zip(items, weights):
            acc += w
            if u < acc:
                return item
        return items[-1]
