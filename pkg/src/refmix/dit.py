"""Desk-scale diffusion-transformer trunk.

Sequences pack text, noise, and reference tokens; blocks run pre-norm
attention (rotary-encoded, optionally extended with source-branch K/V)
followed by a pre-norm MLP, both residual. The backward pass is fully
analytic so adapter training and gradient verification run without any
autodiff framework. Small enough that finite differences finish in
seconds.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionParams, SourceKV, attention_backward, mixed_attention
from .encoding import (
    EncodingScheme,
    ImageGrid,
    RopeTable,
    Span,
    TokenCoordinate,
    assign_coordinates,
    rope_angles,
    rope_rotate_with_angles,
)
from .errors import ContractError, ShapeError, TrainingError
from .lora import LoRAAdapter, apply_lora, lora_gate
from .tensor import SeededRng, matmul, rms_norm

MAX_REFERENCES = 5


@dataclass(frozen=True)
class LatentShape:
    height: int
    width: int
    channels: int

    @property
    def size(self) -> int:
        return self.height * self.width * self.channels


@dataclass(frozen=True)
class DiTConfig:
    d_model: int = 32
    num_heads: int = 4
    num_blocks: int = 2
    latent: LatentShape = LatentShape(4, 4, 4)
    mlp_hidden: int = 64
    norm_eps: float = 1e-6
    max_text_len: int = 8
    max_references: int = MAX_REFERENCES

    def rope_table(self) -> RopeTable:
        return RopeTable.default(self.d_model // self.num_heads)


@dataclass
class BlockParams:
    attn: AttentionParams
    norm1_gain: np.ndarray
    norm2_gain: np.ndarray
    w_mlp1: np.ndarray  # (mlp_hidden, d_model)
    w_mlp2: np.ndarray  # (d_model, mlp_hidden)


@dataclass
class DiTParams:
    config: DiTConfig
    embed: np.ndarray  # (d_model, latent channels)
    unembed: np.ndarray  # (latent channels, d_model)
    w_time: np.ndarray  # (d_model, d_model)
    time_freqs: np.ndarray  # (d_model // 2,)
    blocks: list[BlockParams] = field(default_factory=list)

    def named_tensors(self) -> dict[str, np.ndarray]:
        out = {
            "embed": self.embed,
            "unembed": self.unembed,
            "w_time": self.w_time,
            "time_freqs": self.time_freqs,
        }
        for i, blk in enumerate(self.blocks):
            p = f"block{i}."
            out[p + "w_q"] = blk.attn.w_q
            out[p + "w_k"] = blk.attn.w_k
            out[p + "w_v"] = blk.attn.w_v
            out[p + "w_o"] = blk.attn.w_o
            out[p + "norm1_gain"] = blk.norm1_gain
            out[p + "norm2_gain"] = blk.norm2_gain
            out[p + "w_mlp1"] = blk.w_mlp1
            out[p + "w_mlp2"] = blk.w_mlp2
        return out

    def adapter_target_shapes(self) -> dict[str, tuple[int, int]]:
        """Adapters attach to every attention projection matrix."""
        shapes = {}
        for i in range(len(self.blocks)):
            for w in ("w_q", "w_k", "w_v", "w_o"):
                shapes[f"block{i}.{w}"] = (self.config.d_model, self.config.d_model)
        return shapes


def init_params(config: DiTConfig, rng: SeededRng) -> DiTParams:
    d = config.d_model
    scale = 1.0 / np.sqrt(d)
    blocks = []
    for _ in range(config.num_blocks):
        blocks.append(
            BlockParams(
                attn=AttentionParams(
                    rng.normal((d, d)) * scale,
                    rng.normal((d, d)) * scale,
                    rng.normal((d, d)) * scale,
                    rng.normal((d, d)) * scale,
                    config.num_heads,
                ),
                norm1_gain=np.ones(d),
                norm2_gain=np.ones(d),
                w_mlp1=rng.normal((config.mlp_hidden, d)) * scale,
                w_mlp2=rng.normal((d, config.mlp_hidden)) * (1.0 / np.sqrt(config.mlp_hidden)),
            )
        )
    half = d // 2
    return DiTParams(
        config=config,
        embed=rng.normal((d, config.latent.channels)) * (1.0 / np.sqrt(config.latent.channels)),
        unembed=rng.normal((config.latent.channels, d)) * scale,
        w_time=rng.normal((d, d)) * scale,
        time_freqs=10.0 ** (-4.0 * np.arange(half) / max(half, 1)),
        blocks=blocks,
    )


def embed_text(prompt: str, d_model: int, max_len: int = 8) -> np.ndarray:
    """Deterministic stand-in for a text encoder: per-word hash-seeded rows."""
    words = prompt.split() or [""]
    rows = []
    for i, word in enumerate(words[:max_len]):
        digest = hashlib.sha256(f"{i}:{word}".encode("utf-8")).digest()
        seed = int.from_bytes(digest[:8], "little")
        rows.append(SeededRng(seed).normal((d_model,)))
    return np.stack(rows, axis=0)


def embed_latent_grid(params: DiTParams, latent: np.ndarray) -> np.ndarray:
    """Lift an (h, w, c) latent grid into (h, w, d_model) token space."""
    latent = np.asarray(latent, dtype=np.float64)
    h, w, c = latent.shape
    if c != params.embed.shape[1]:
        raise ShapeError(f"latent channels {c} != embed input {params.embed.shape[1]}")
    rows = matmul(latent.reshape(h * w, c), params.embed.T)
    return rows.reshape(h, w, params.config.d_model)


@dataclass
class PackedSequence:
    """Token matrix plus span table: text, then noise, then references."""

    tokens: np.ndarray
    text_span: tuple[int, int]
    noise_span: tuple[int, int]
    ref_spans: list[Span]
    coords: list[TokenCoordinate]
    scheme: EncodingScheme
    noise_grid: tuple[int, int]

    @property
    def length(self) -> int:
        return self.tokens.shape[0]

    def noise_tokens(self) -> np.ndarray:
        return self.tokens[self.noise_span[0] : self.noise_span[1]]


def pack_sequence(
    text_emb: np.ndarray,
    noise_tokens: np.ndarray,
    ref_tokens: list[np.ndarray],
    scheme: EncodingScheme,
    max_refs: int = MAX_REFERENCES,
) -> PackedSequence:
    """Concatenate text + noise-grid + reference-grid tokens with coordinates.

    Grids arrive as (h, w, d_model) arrays already in token space;
    references are clean encodings and the noise grid is the one the model
    denoises.
    """
    if len(ref_tokens) > max_refs:
        raise ContractError(f"{len(ref_tokens)} reference grids exceed the cap of {max_refs}")
    text_emb = np.asarray(text_emb, dtype=np.float64)
    d_model = text_emb.shape[1]
    grids = [ImageGrid(0, noise_tokens.shape[0], noise_tokens.shape[1])]
    rows = [text_emb, noise_tokens.reshape(-1, d_model)]
    for i, ref in enumerate(ref_tokens, start=1):
        if ref.shape[2] != d_model:
            raise ShapeError(f"reference {i} has d_model {ref.shape[2]}, expected {d_model}")
        grids.append(ImageGrid(i, ref.shape[0], ref.shape[1]))
        rows.append(ref.reshape(-1, d_model))
    coords = assign_coordinates(text_emb.shape[0], grids, scheme)
    text_len = text_emb.shape[0]
    noise_area = grids[0].area
    spans = []
    start = text_len + noise_area
    for g in grids[1:]:
        spans.append(Span(g.image_index, start, start + g.area))
        start += g.area
    return PackedSequence(
        tokens=np.concatenate(rows, axis=0),
        text_span=(0, text_len),
        noise_span=(text_len, text_len + noise_area),
        ref_spans=spans,
        coords=coords,
        scheme=scheme,
        noise_grid=(noise_tokens.shape[0], noise_tokens.shape[1]),
    )


def _gelu(x: np.ndarray) -> np.ndarray:
    u = np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)
    return 0.5 * x * (1.0 + np.tanh(u))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    c = np.sqrt(2.0 / np.pi)
    u = c * (x + 0.044715 * x**3)
    t = np.tanh(u)
    du = c * (1.0 + 3 * 0.044715 * x**2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du


def _rms_backward(d_y: np.ndarray, x: np.ndarray, gain: np.ndarray, eps: float):
    """Gradients through rms_norm: returns (d_x, d_gain)."""
    n = x.shape[1]
    s = 1.0 / np.sqrt(np.mean(x * x, axis=1, keepdims=True) + eps)
    d_gain = np.sum(d_y * x * s, axis=0)
    inner = np.sum(d_y * gain * x, axis=1, keepdims=True)
    d_x = d_y * gain * s - x * (s**3) * inner / n
    return d_x, d_gain


def _rotate_heads(x: np.ndarray, angles: np.ndarray, num_heads: int) -> np.ndarray:
    dh = x.shape[1] // num_heads
    out = np.empty_like(x)
    for h in range(num_heads):
        out[:, h * dh : (h + 1) * dh] = rope_rotate_with_angles(x[:, h * dh : (h + 1) * dh], angles)
    return out


def _time_features(t: float, freqs: np.ndarray) -> np.ndarray:
    return np.concatenate([np.sin(t * freqs), np.cos(t * freqs)])


def resolve_block_weights(
    params: DiTParams, adapters: LoRAAdapter | None, block_index: int
) -> AttentionParams:
    """Attention weights with the adapter delta folded in (if any)."""
    blk = params.blocks[block_index].attn
    if adapters is None:
        return blk
    names = {w: f"block{block_index}.{w}" for w in ("w_q", "w_k", "w_v", "w_o")}
    return AttentionParams(
        apply_lora(blk.w_q, adapters.entry(names["w_q"])),
        apply_lora(blk.w_k, adapters.entry(names["w_k"])),
        apply_lora(blk.w_v, adapters.entry(names["w_v"])),
        apply_lora(blk.w_o, adapters.entry(names["w_o"])),
        blk.num_heads,
    )


@dataclass
class _BlockCache:
    x_in: np.ndarray
    h1: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    attn_cache: object
    x_mid: np.ndarray
    h2: np.ndarray
    pre_act: np.ndarray
    act: np.ndarray
    weights: AttentionParams


@dataclass
class ForwardCache:
    packed: PackedSequence
    t: float
    adapters_active: LoRAAdapter | None
    angles: np.ndarray
    time_feat: np.ndarray
    blocks: list[_BlockCache]
    x_final: np.ndarray
    consumed: bool = False


def dit_forward(
    packed: PackedSequence,
    params: DiTParams,
    adapters: LoRAAdapter | None = None,
    t: float = 0.0,
    *,
    source_kvs: list[SourceKV] | None = None,
    capture_kv: bool = False,
    want_cache: bool = False,
):
    """Velocity prediction over the noise span.

    ``adapters`` only take effect when the sequence carries at least one
    reference span (the gate contract); ``source_kvs`` supplies per-layer
    mixing K/V captured from a parallel branch, and ``capture_kv=True``
    returns this branch's own per-layer noise K/V for injection elsewhere.
    """
    cfg = params.config
    active = adapters if (adapters is not None and lora_gate(packed)) else None
    if source_kvs is not None and len(source_kvs) != cfg.num_blocks:
        raise ContractError(
            f"need one SourceKV per block ({cfg.num_blocks}), got {len(source_kvs)}"
        )
    angles = rope_angles(packed.coords, cfg.rope_table())
    feat = _time_features(t, params.time_freqs)
    x = packed.tokens.copy()
    ns, ne = packed.noise_span
    x[ns:ne] += matmul(feat[None, :], params.w_time.T)[0]

    captured: list[SourceKV] = []
    block_caches: list[_BlockCache] = []
    for i in range(cfg.num_blocks):
        blk = params.blocks[i]
        weights = resolve_block_weights(params, active, i)
        h1 = rms_norm(x, blk.norm1_gain, cfg.norm_eps)
        q = matmul(h1, weights.w_q.T)
        k = matmul(h1, weights.w_k.T)
        v = matmul(h1, weights.w_v.T)
        qr = _rotate_heads(q, angles, cfg.num_heads)
        kr = _rotate_heads(k, angles, cfg.num_heads)
        if capture_kv:
            captured.append(SourceKV(kr[ns:ne].copy(), v[ns:ne].copy(), layer_id=i))
        src = None
        if source_kvs is not None:
            src = source_kvs[i]
            if src.layer_id != i:
                raise ContractError(f"SourceKV layer_id {src.layer_id} used at layer {i}")
        attn = mixed_attention((qr, kr, v), src, weights, want_cache=want_cache)
        if want_cache:
            attn_out, attn_cache = attn
        else:
            attn_out, attn_cache = attn, None
        x_mid = x + attn_out
        h2 = rms_norm(x_mid, blk.norm2_gain, cfg.norm_eps)
        pre_act = matmul(h2, blk.w_mlp1.T)
        act = _gelu(pre_act)
        x = x_mid + matmul(act, blk.w_mlp2.T)
        if want_cache:
            block_caches.append(
                _BlockCache(
                    x_in=x_mid - attn_out, h1=h1, q=q, k=k, v=v, attn_cache=attn_cache,
                    x_mid=x_mid, h2=h2, pre_act=pre_act, act=act, weights=weights,
                )
            )

    velocity = matmul(x[ns:ne], params.unembed.T).reshape(
        packed.noise_grid[0], packed.noise_grid[1], cfg.latent.channels
    )
    result = [velocity]
    if want_cache:
        result.append(
            ForwardCache(
                packed=packed, t=t, adapters_active=active, angles=angles,
                time_feat=feat, blocks=block_caches, x_final=x,
            )
        )
    if capture_kv:
        result.append(captured)
    return result[0] if len(result) == 1 else tuple(result)


@dataclass
class DiTGrads:
    """Named gradients: base tensors plus 'name.lora_a' / 'name.lora_b'."""

    by_name: dict[str, np.ndarray]

    def adapter_grads(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        out = {}
        for key, g in self.by_name.items():
            if key.endswith(".lora_a"):
                name = key[: -len(".lora_a")]
                out.setdefault(name, [None, None])[0] = g
            elif key.endswith(".lora_b"):
                name = key[: -len(".lora_b")]
                out.setdefault(name, [None, None])[1] = g
        return {k: (a, b) for k, (a, b) in out.items()}


def dit_backward(cache: ForwardCache, grad_velocity: np.ndarray, params: DiTParams) -> DiTGrads:
    """Analytic gradients of a scalar loss through dit_forward."""
    if cache is None or cache.consumed:
        raise ContractError("forward cache missing or already consumed")
    cache.consumed = True
    cfg = params.config
    ns, ne = cache.packed.noise_span
    grads: dict[str, np.ndarray] = {}

    d_rows = np.asarray(grad_velocity, dtype=np.float64).reshape(ne - ns, cfg.latent.channels)
    grads["unembed"] = matmul(d_rows.T, cache.x_final[ns:ne])
    d_x = np.zeros_like(cache.x_final)
    d_x[ns:ne] = matmul(d_rows, params.unembed)

    adapters = cache.adapters_active
    for i in reversed(range(cfg.num_blocks)):
        blk = params.blocks[i]
        c = cache.blocks[i]
        # MLP branch
        d_act = matmul(d_x, blk.w_mlp2)
        grads[f"block{i}.w_mlp2"] = matmul(d_x.T, c.act)
        d_pre = d_act * _gelu_grad(c.pre_act)
        grads[f"block{i}.w_mlp1"] = matmul(d_pre.T, c.h2)
        d_h2 = matmul(d_pre, blk.w_mlp1)
        d_from_norm2, d_g2 = _rms_backward(d_h2, c.x_mid, blk.norm2_gain, cfg.norm_eps)
        grads[f"block{i}.norm2_gain"] = d_g2
        d_x_mid = d_x + d_from_norm2
        # Attention branch
        ag = attention_backward(c.attn_cache, d_x_mid)
        d_q = _rotate_heads(ag.d_q, -cache.angles, cfg.num_heads)
        d_k = _rotate_heads(ag.d_k, -cache.angles, cfg.num_heads)
        d_v = ag.d_v
        d_wq = matmul(d_q.T, c.h1)
        d_wk = matmul(d_k.T, c.h1)
        d_wv = matmul(d_v.T, c.h1)
        d_wo = ag.d_w_o
        for wname, d_w in (("w_q", d_wq), ("w_k", d_wk), ("w_v", d_wv), ("w_o", d_wo)):
            full = f"block{i}.{wname}"
            grads[full] = d_w
            if adapters is not None and full in adapters.targets:
                a, b = adapters.targets[full]
                scale = adapters.alpha / adapters.rank
                grads[full + ".lora_b"] = scale * matmul(d_w, a.T)
                grads[full + ".lora_a"] = scale * matmul(b.T, d_w)
        d_h1 = (
            matmul(d_q, c.weights.w_q)
            + matmul(d_k, c.weights.w_k)
            + matmul(d_v, c.weights.w_v)
        )
        d_from_norm1, d_g1 = _rms_backward(d_h1, c.x_in, blk.norm1_gain, cfg.norm_eps)
        grads[f"block{i}.norm1_gain"] = d_g1
        d_x = d_x_mid + d_from_norm1

    d_e = np.sum(d_x[ns:ne], axis=0)
    grads["w_time"] = np.outer(d_e, cache.time_feat)
    return DiTGrads(grads)


def training_step_guard(loss: float, step: int) -> None:
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss} at step {step}")
