"""Low-rank adapters gated on the presence of reference images.

An adapter is an (A, B) pair per target matrix; the effective update is
``base + (alpha / rank) * B @ A``. B starts at zero so a fresh adapter is
an exact no-op. Edit and gen adapters are distinct artifacts and are
checkpointed separately; they are never merged.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ShapeError
from .tensor import SeededRng, matmul

MODES = ("edit", "gen")


class AdapterEntry(NamedTuple):
    a: np.ndarray  # (rank, d_in)
    b: np.ndarray  # (d_out, rank)
    alpha: float
    rank: int


@dataclass
class LoRAAdapter:
    mode: str
    rank: int
    alpha: float
    targets: dict[str, tuple[np.ndarray, np.ndarray]]  # name -> (A, B)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ShapeError(f"adapter mode must be one of {MODES}, got {self.mode!r}")
        if self.rank < 1:
            raise ShapeError(f"adapter rank must be >= 1, got {self.rank}")
        for name, (a, b) in self.targets.items():
            if a.shape[0] != self.rank or b.shape[1] != self.rank:
                raise ShapeError(
                    f"target {name!r}: A {a.shape} / B {b.shape} inconsistent with rank {self.rank}"
                )

    def entry(self, name: str) -> AdapterEntry:
        a, b = self.targets[name]
        return AdapterEntry(a, b, self.alpha, self.rank)

    def copy(self) -> "LoRAAdapter":
        return LoRAAdapter(
            self.mode,
            self.rank,
            self.alpha,
            {k: (a.copy(), b.copy()) for k, (a, b) in self.targets.items()},
        )


def apply_lora(base: np.ndarray, entry: AdapterEntry) -> np.ndarray:
    """base + (alpha / rank) * B @ A."""
    a, b, alpha, rank = entry
    if b.shape != (base.shape[0], rank) or a.shape != (rank, base.shape[1]):
        raise ShapeError(
            f"adapter shapes A {a.shape}, B {b.shape} do not fit base {base.shape} "
            f"at rank {rank}"
        )
    return base + (alpha / rank) * matmul(b, a)


def init_adapter(
    target_shapes: dict[str, tuple[int, int]],
    rank: int,
    alpha: float,
    mode: str,
    rng: SeededRng,
    a_scale: float = 0.01,
) -> LoRAAdapter:
    """Fresh adapter: A small random, B zero, so the initial delta is zero."""
    targets = {}
    for name in sorted(target_shapes):
        d_out, d_in = target_shapes[name]
        targets[name] = (
            rng.normal((rank, d_in)) * a_scale,
            np.zeros((d_out, rank), dtype=np.float64),
        )
    return LoRAAdapter(mode, rank, alpha, targets)


def lora_gate(packed) -> bool:
    """Adapters activate iff the packed sequence carries reference spans."""
    return len(packed.ref_spans) >= 1
