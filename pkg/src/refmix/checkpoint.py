"""Versioned binary checkpoint container.

Layout (all little-endian):

    magic b"RXCK" | u32 version | u32 meta_len | meta JSON (utf-8)
    | u32 tensor_count | per tensor:
        u16 name_len | name utf-8 | u8 ndim | u64 * ndim dims
        | float64 raw data (row-major)

Base parameters and adapters are separate files; an adapter file's meta
carries its mode tag (edit or gen), and loading checks the tag so the two
can never be confused.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .dit import BlockParams, DiTConfig, DiTParams, LatentShape
from .attention import AttentionParams
from .errors import ManifestError, ShapeError
from .lora import LoRAAdapter

MAGIC = b"RXCK"
VERSION = 1


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    blob += struct.pack("<I", len(meta_bytes))
    blob += meta_bytes
    blob += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=np.float64)
        name_bytes = name.encode("utf-8")
        blob += struct.pack("<H", len(name_bytes))
        blob += name_bytes
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        blob += arr.tobytes(order="C")
    Path(path).write_bytes(bytes(blob))


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ManifestError(f"{path}: not a checkpoint file (bad magic)")
    off = 4
    (version,) = struct.unpack_from("<I", data, off)
    off += 4
    if version != VERSION:
        raise ManifestError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<I", data, off)
    off += 4
    meta = json.loads(data[off : off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        tensors[name] = arr.copy()
    return tensors, meta


def save_params(path: str | Path, params: DiTParams) -> None:
    cfg = params.config
    meta = {
        "kind": "dit",
        "d_model": cfg.d_model,
        "num_heads": cfg.num_heads,
        "num_blocks": cfg.num_blocks,
        "latent": [cfg.latent.height, cfg.latent.width, cfg.latent.channels],
        "mlp_hidden": cfg.mlp_hidden,
        "norm_eps": cfg.norm_eps,
        "max_text_len": cfg.max_text_len,
        "max_references": cfg.max_references,
    }
    save_tensors(path, params.named_tensors(), meta)


def load_params(path: str | Path) -> DiTParams:
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "dit":
        raise ManifestError(f"{path}: expected a dit checkpoint, got kind {meta.get('kind')!r}")
    cfg = DiTConfig(
        d_model=meta["d_model"],
        num_heads=meta["num_heads"],
        num_blocks=meta["num_blocks"],
        latent=LatentShape(*meta["latent"]),
        mlp_hidden=meta["mlp_hidden"],
        norm_eps=meta["norm_eps"],
        max_text_len=meta["max_text_len"],
        max_references=meta["max_references"],
    )
    blocks = []
    for i in range(cfg.num_blocks):
        p = f"block{i}."
        blocks.append(
            BlockParams(
                attn=AttentionParams(
                    tensors[p + "w_q"], tensors[p + "w_k"], tensors[p + "w_v"],
                    tensors[p + "w_o"], cfg.num_heads,
                ),
                norm1_gain=tensors[p + "norm1_gain"],
                norm2_gain=tensors[p + "norm2_gain"],
                w_mlp1=tensors[p + "w_mlp1"],
                w_mlp2=tensors[p + "w_mlp2"],
            )
        )
    return DiTParams(
        config=cfg,
        embed=tensors["embed"],
        unembed=tensors["unembed"],
        w_time=tensors["w_time"],
        time_freqs=tensors["time_freqs"],
        blocks=blocks,
    )


def save_adapter(path: str | Path, adapter: LoRAAdapter) -> None:
    meta = {"kind": "lora", "mode": adapter.mode, "rank": adapter.rank, "alpha": adapter.alpha}
    tensors = {}
    for name, (a, b) in adapter.targets.items():
        tensors[name + ".a"] = a
        tensors[name + ".b"] = b
    save_tensors(path, tensors, meta)


def load_adapter(path: str | Path, expect_mode: str | None = None) -> LoRAAdapter:
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "lora":
        raise ManifestError(f"{path}: expected an adapter checkpoint, got {meta.get('kind')!r}")
    if expect_mode is not None and meta["mode"] != expect_mode:
        raise ShapeError(
            f"{path}: adapter mode is {meta['mode']!r}, expected {expect_mode!r}"
        )
    targets: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for key, arr in tensors.items():
        if key.endswith(".a"):
            targets.setdefault(key[:-2], [None, None])[0] = arr
        elif key.endswith(".b"):
            targets.setdefault(key[:-2], [None, None])[1] = arr
    pairs = {k: (a, b) for k, (a, b) in targets.items()}
    return LoRAAdapter(meta["mode"], meta["rank"], meta["alpha"], pairs)
