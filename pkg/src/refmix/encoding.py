"""Per-token (index, y, x) coordinates for multi-image sequences, plus
axis-wise rotary application.

A layout is an ordered list of image grids: index 0 is the target/noise
image, 1..R are reference images in user order. Text tokens sit at the
origin. Two mechanisms keep coordinates collision-free across images:

* index channel: tokens carry the ordinal of their image;
* x-shift: each image's columns are offset by the cumulative width of
  every earlier image (the target grid participates in the accumulation).

The four selectable schemes toggle those two mechanisms independently.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .backend import kernels
from .errors import ConfigError, LayoutError, ShapeError

ROPE_BASE_DEFAULT = 10000.0


class TokenCoordinate(NamedTuple):
    idx: int
    y: int
    x: int


class Span(NamedTuple):
    """Half-open token range [start, stop) owned by one image."""

    image_index: int
    start: int
    stop: int


@dataclass(frozen=True)
class ImageGrid:
    image_index: int
    height_tokens: int
    width_tokens: int

    def __post_init__(self):
        if self.image_index < 0:
            raise LayoutError(f"image_index must be >= 0, got {self.image_index}")
        if self.height_tokens < 1 or self.width_tokens < 1:
            raise LayoutError(
                f"grid dims must be positive, got "
                f"{self.height_tokens}x{self.width_tokens}"
            )

    @property
    def area(self) -> int:
        return self.height_tokens * self.width_tokens


@dataclass(frozen=True)
class EncodingScheme:
    """Toggle pair selecting one of the four coordinate schemes.

    (False, False) = scheme 1, (False, True) = scheme 2,
    (True, False) = scheme 3, (True, True) = scheme 4 (default).
    """

    index_encoding: bool = True
    position_shift: bool = True

    @classmethod
    def from_number(cls, n: int) -> "EncodingScheme":
        table = {
            1: cls(False, False),
            2: cls(False, True),
            3: cls(True, False),
            4: cls(True, True),
        }
        if n not in table:
            raise ConfigError(f"scheme number must be 1..4, got {n}")
        return table[n]

    @property
    def number(self) -> int:
        return 1 + (2 if self.index_encoding else 0) + (1 if self.position_shift else 0)


@dataclass(frozen=True)
class RopeTable:
    """Rotary channel layout: contiguous groups for the (idx, y, x) axes.

    Group sizes must be even and sum to head_dim. The x group gets the
    most channels by default since shifted x coordinates grow the largest.
    """

    head_dim: int
    group_sizes: tuple[int, int, int]
    base: float = ROPE_BASE_DEFAULT

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2 != 0:
            raise ConfigError(f"head_dim must be even and positive, got {self.head_dim}")
        if sum(self.group_sizes) != self.head_dim:
            raise ConfigError(
                f"group sizes {self.group_sizes} do not sum to head_dim {self.head_dim}"
            )
        for g in self.group_sizes:
            if g < 0 or g % 2 != 0:
                raise ConfigError(f"group sizes must be even and >= 0, got {self.group_sizes}")

    @classmethod
    def default(cls, head_dim: int) -> "RopeTable":
        # Quarter of the channels each for idx and y (rounded down to an even
        # count), the rest for x, which needs the most range once shifted.
        quarter = (head_dim // 4) & ~1
        if quarter < 2:
            raise ConfigError(
                f"default rope split needs head_dim >= 8, got {head_dim}; "
                "pass explicit group sizes instead"
            )
        return cls(head_dim, (quarter, quarter, head_dim - 2 * quarter))


def _check_grids(grids: list[ImageGrid]) -> list[ImageGrid]:
    if not grids:
        raise LayoutError("layout needs at least one image grid")
    seen = set()
    for g in grids:
        if g.image_index in seen:
            raise LayoutError(f"duplicate image_index {g.image_index} in layout")
        seen.add(g.image_index)
    if seen != set(range(len(grids))):
        raise LayoutError(f"image indices must be contiguous from 0, got {sorted(seen)}")
    return sorted(grids, key=lambda g: g.image_index)


def assign_coordinates(
    text_len: int, grids: list[ImageGrid], scheme: EncodingScheme
) -> list[TokenCoordinate]:
    """Coordinates for text span + grids in index order, row-major per grid."""
    if text_len < 0:
        raise LayoutError(f"text_len must be >= 0, got {text_len}")
    ordered = _check_grids(grids)
    coords = [TokenCoordinate(0, 0, 0)] * text_len
    offset = 0
    for g in ordered:
        idx = g.image_index if scheme.index_encoding else 0
        x_base = offset if scheme.position_shift else 0
        for r in range(g.height_tokens):
            for c in range(g.width_tokens):
                coords.append(TokenCoordinate(idx, r, c + x_base))
        offset += g.width_tokens
    return coords


def check_injectivity(
    coords: list[TokenCoordinate], spans: list[Span]
) -> list[tuple[int, int, TokenCoordinate]]:
    """Every pair of image tokens from distinct images sharing a coordinate.

    Returns (token_a, token_b, coordinate) triples; empty means injective.
    Text tokens are outside all spans and never counted.
    """
    if not coords:
        raise LayoutError("coords must be nonempty")
    by_coord: dict[TokenCoordinate, list[tuple[int, int]]] = {}
    for span in spans:
        for t in range(span.start, span.stop):
            by_coord.setdefault(coords[t], []).append((span.image_index, t))
    violations = []
    for coord, owners in by_coord.items():
        if len(owners) < 2:
            continue
        for i in range(len(owners)):
            for j in range(i + 1, len(owners)):
                if owners[i][0] != owners[j][0]:
                    violations.append((owners[i][1], owners[j][1], coord))
    violations.sort()
    return violations


def coords_to_array(coords: list[TokenCoordinate]) -> np.ndarray:
    return np.asarray(coords, dtype=np.float64).reshape(len(coords), 3)


def rope_angles(coords: list[TokenCoordinate], table: RopeTable) -> np.ndarray:
    """Rotation angle per (token, channel pair): component * base^(-2j/group)."""
    comp = coords_to_array(coords)  # columns: idx, y, x
    cols = []
    for axis, size in enumerate(table.group_sizes):
        if size == 0:
            continue
        j = np.arange(size // 2, dtype=np.float64)
        freqs = table.base ** (-2.0 * j / size)
        cols.append(comp[:, axis : axis + 1] * freqs[None, :])
    return np.ascontiguousarray(np.concatenate(cols, axis=1))


def rope_rotate(x: np.ndarray, coords: list[TokenCoordinate], table: RopeTable) -> np.ndarray:
    """Rotate channel pairs of x by the axis-group angles for each token."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape != (len(coords), table.head_dim):
        raise ShapeError(
            f"rope_rotate expects shape ({len(coords)}, {table.head_dim}), got {x.shape}"
        )
    return kernels().rope_apply(x, rope_angles(coords, table))


def rope_rotate_with_angles(x: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Rotation with precomputed angles; negate angles for the inverse."""
    return kernels().rope_apply(np.asarray(x, dtype=np.float64), angles)
