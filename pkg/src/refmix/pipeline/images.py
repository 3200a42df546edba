"""Deterministic image plumbing: PNG I/O, the fixed latent<->pixel map,
and the procedural patterns the stub backends draw.

Latent cells map to pixel blocks through an affine value-to-color rule
(one latent channel per RGB channel, clipped); the inverse average-pools
blocks back. Lossy through uint8, which is fine — nothing round-trips
latents through disk exactly.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
from PIL import Image

from ..tensor import SeededRng

LATENT_GAIN = 48.0
LATENT_BIAS = 127.5
CELL_PIXELS = 16


def save_png(path: str | Path, arr: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def load_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def latent_to_image(latent: np.ndarray, cell_pixels: int = CELL_PIXELS) -> np.ndarray:
    """(h, w, c) latent -> uint8 RGB, each cell rendered as a solid block."""
    h, w, c = latent.shape
    rgb = np.zeros((h, w, 3), dtype=np.float64)
    rgb[:, :, : min(c, 3)] = latent[:, :, : min(c, 3)]
    px = np.clip(np.round(LATENT_BIAS + LATENT_GAIN * rgb), 0, 255).astype(np.uint8)
    return np.repeat(np.repeat(px, cell_pixels, axis=0), cell_pixels, axis=1)


def image_to_latent(img: np.ndarray, grid_h: int, grid_w: int, channels: int) -> np.ndarray:
    """Average-pool an RGB image onto a latent grid, inverting the value map."""
    img = np.asarray(img, dtype=np.float64)
    ih, iw = img.shape[:2]
    latent = np.zeros((grid_h, grid_w, channels), dtype=np.float64)
    ys = np.linspace(0, ih, grid_h + 1).astype(int)
    xs = np.linspace(0, iw, grid_w + 1).astype(int)
    for r in range(grid_h):
        for col in range(grid_w):
            block = img[ys[r] : max(ys[r + 1], ys[r] + 1), xs[col] : max(xs[col + 1], xs[col] + 1)]
            mean = block.reshape(-1, 3).mean(axis=0)
            latent[r, col, : min(channels, 3)] = (mean[: min(channels, 3)] - LATENT_BIAS) / LATENT_GAIN
    return latent


def _hash_rng(*parts) -> SeededRng:
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode("utf-8")).digest()
    return SeededRng(int.from_bytes(digest[:8], "little"))


def render_pattern(key: str, size: int = 64) -> np.ndarray:
    """Seeded procedural color pattern: stripes, checks, rings, or gradient."""
    rng = _hash_rng("pattern", key)
    kind = rng.integers(0, 4)
    c1 = np.array([rng.integers(30, 226) for _ in range(3)], dtype=np.float64)
    c2 = np.array([rng.integers(30, 226) for _ in range(3)], dtype=np.float64)
    period = rng.integers(6, 17)
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == 0:
        mask = ((xx + yy) // period) % 2
    elif kind == 1:
        mask = ((xx // period) % 2) ^ ((yy // period) % 2)
    elif kind == 2:
        r = np.sqrt((xx - size / 2) ** 2 + (yy - size / 2) ** 2)
        mask = (r // period) % 2
    else:
        mask = (xx * period / size) % 2 >= 1
    img = np.where(mask[..., None] == 0, c1[None, None, :], c2[None, None, :])
    return img.astype(np.uint8)


def tint(img: np.ndarray, key: str, strength: float = 0.45) -> np.ndarray:
    """Blend a hash-picked color over the whole image."""
    rng = _hash_rng("tint", key)
    color = np.array([rng.integers(0, 256) for _ in range(3)], dtype=np.float64)
    out = (1 - strength) * img.astype(np.float64) + strength * color[None, None, :]
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def center_crop_resize(img: np.ndarray, frac: float = 0.6) -> np.ndarray:
    """Central crop re-expanded to the original size (nearest neighbor)."""
    h, w = img.shape[:2]
    ch, cw = max(1, int(h * frac)), max(1, int(w * frac))
    y0, x0 = (h - ch) // 2, (w - cw) // 2
    crop = img[y0 : y0 + ch, x0 : x0 + cw]
    ys = (np.arange(h) * ch // h).clip(0, ch - 1)
    xs = (np.arange(w) * cw // w).clip(0, cw - 1)
    return crop[ys][:, xs]


def recolor_region(img: np.ndarray, key: str) -> np.ndarray:
    """Recolor a hash-chosen rectangle (the stub editor's 'alteration')."""
    rng = _hash_rng("region", key)
    h, w = img.shape[:2]
    rh, rw = max(2, h // 3), max(2, w // 3)
    y0 = rng.integers(0, max(1, h - rh))
    x0 = rng.integers(0, max(1, w - rw))
    color = np.array([rng.integers(0, 256) for _ in range(3)], dtype=np.float64)
    out = img.astype(np.float64).copy()
    out[y0 : y0 + rh, x0 : x0 + rw] = 0.35 * out[y0 : y0 + rh, x0 : x0 + rw] + 0.65 * color
    return np.clip(np.round(out), 0, 255).astype(np.uint8)
