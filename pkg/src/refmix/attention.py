"""Multi-head attention with source-branch key/value injection.

The mixing variant extends the target branch's keys and values with the
noise-token keys/values captured from a parallel source branch at the same
layer, so both branches attend over shared content. Order of the
concatenation: target-noise rows, target-text rows, source-noise rows.
Softmax is row-stochastic over the full concatenation; no masking.

Backward passes are analytic and verified against central finite
differences in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import matmul, softmax_rows


@dataclass
class BranchTokens:
    """Token rows of one branch, partitioned into text and noise spans."""

    text_tokens: np.ndarray
    noise_tokens: np.ndarray
    branch_tag: str = "target"

    def __post_init__(self):
        self.text_tokens = np.asarray(self.text_tokens, dtype=np.float64)
        self.noise_tokens = np.asarray(self.noise_tokens, dtype=np.float64)
        if self.text_tokens.ndim != 2 or self.noise_tokens.ndim != 2:
            raise ShapeError("token partitions must be 2-D (rows x d_model)")
        if self.text_tokens.shape[0] == 0 and self.noise_tokens.shape[0] == 0:
            raise ShapeError("text and noise partitions cannot both be empty")
        if (
            self.text_tokens.shape[0] > 0
            and self.noise_tokens.shape[0] > 0
            and self.text_tokens.shape[1] != self.noise_tokens.shape[1]
        ):
            raise ShapeError(
                f"d_model differs across partitions: text {self.text_tokens.shape}, "
                f"noise {self.noise_tokens.shape}"
            )
        if self.branch_tag not in ("target", "source"):
            raise ShapeError(f"branch_tag must be 'target' or 'source', got {self.branch_tag!r}")

    @property
    def d_model(self) -> int:
        if self.noise_tokens.shape[0] > 0:
            return self.noise_tokens.shape[1]
        return self.text_tokens.shape[1]

    def stacked(self) -> np.ndarray:
        """All rows, noise span first, then text."""
        return np.concatenate([self.noise_tokens, self.text_tokens], axis=0)


@dataclass
class AttentionParams:
    """Projection weights, stored (d_out, d_in); applied as x @ W.T."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    num_heads: int

    def __post_init__(self):
        for name in ("w_q", "w_k", "w_v", "w_o"):
            w = np.asarray(getattr(self, name), dtype=np.float64)
            setattr(self, name, w)
            if w.ndim != 2 or w.shape[0] != w.shape[1]:
                raise ShapeError(f"{name} must be square, got {w.shape}")
            if w.shape != self.w_q.shape:
                raise ShapeError("all projection matrices must share d_model")
        if self.num_heads < 1 or self.w_q.shape[0] % self.num_heads != 0:
            raise ShapeError(
                f"d_model {self.w_q.shape[0]} not divisible by num_heads {self.num_heads}"
            )

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_heads


@dataclass
class SourceKV:
    """Noise-token keys/values captured from the source branch at one layer."""

    k_src: np.ndarray
    v_src: np.ndarray
    layer_id: int = 0

    def __post_init__(self):
        self.k_src = np.asarray(self.k_src, dtype=np.float64)
        self.v_src = np.asarray(self.v_src, dtype=np.float64)
        if self.k_src.shape != self.v_src.shape:
            raise ContractError(
                f"source K/V shapes differ: {self.k_src.shape} vs {self.v_src.shape}"
            )

    def __len__(self) -> int:
        return self.k_src.shape[0]


def project_qkv(tokens: BranchTokens, params: AttentionParams):
    """Flat Q/K/V projections over the branch's rows, noise span first."""
    x = tokens.stacked()
    if x.shape[1] != params.d_model:
        raise ShapeError(f"token dim {x.shape[1]} != params d_model {params.d_model}")
    return (
        matmul(x, params.w_q.T),
        matmul(x, params.w_k.T),
        matmul(x, params.w_v.T),
    )


def _heads(x: np.ndarray, num_heads: int):
    dh = x.shape[1] // num_heads
    return [x[:, h * dh : (h + 1) * dh] for h in range(num_heads)]


def _mha_core_forward(q, k_full, v_full, num_heads):
    """Per-head softmax(Q Kᵀ / sqrt(dh)) V; returns concat context + weights."""
    dh = q.shape[1] // num_heads
    scale = 1.0 / np.sqrt(dh)
    ctx = np.empty_like(q)
    weights = []
    for h, (qh, kh, vh) in enumerate(
        zip(_heads(q, num_heads), _heads(k_full, num_heads), _heads(v_full, num_heads))
    ):
        a = softmax_rows(matmul(qh, kh.T) * scale)
        weights.append(a)
        ctx[:, h * dh : (h + 1) * dh] = matmul(a, vh)
    return ctx, weights


def _mha_core_backward(q, k_full, v_full, weights, d_ctx, num_heads):
    """Gradients of the core attention w.r.t. q, k_full, v_full."""
    dh = q.shape[1] // num_heads
    scale = 1.0 / np.sqrt(dh)
    dq = np.zeros_like(q)
    dk = np.zeros_like(k_full)
    dv = np.zeros_like(v_full)
    for h in range(num_heads):
        sl = slice(h * dh, (h + 1) * dh)
        a = weights[h]
        d_ctx_h = d_ctx[:, sl]
        da = matmul(d_ctx_h, v_full[:, sl].T)
        dv[:, sl] = matmul(a.T, d_ctx_h)
        ds = a * (da - np.sum(da * a, axis=1, keepdims=True))
        dq[:, sl] = matmul(ds, k_full[:, sl]) * scale
        dk[:, sl] = matmul(ds.T, q[:, sl]) * scale
    return dq, dk, dv


@dataclass
class AttentionCache:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    n_src: int
    k_full: np.ndarray
    v_full: np.ndarray
    weights: list
    ctx: np.ndarray
    params: AttentionParams
    tokens: np.ndarray | None = None
    consumed: bool = field(default=False, compare=False)


@dataclass
class AttentionGrads:
    """Gradients from one attention backward pass.

    d_tokens / d_w_q / d_w_k / d_w_v are only available when the forward
    cache recorded the pre-projection token rows.
    """

    d_q: np.ndarray
    d_k: np.ndarray
    d_v: np.ndarray
    d_w_o: np.ndarray
    d_k_src: np.ndarray | None = None
    d_v_src: np.ndarray | None = None
    d_tokens: np.ndarray | None = None
    d_w_q: np.ndarray | None = None
    d_w_k: np.ndarray | None = None
    d_w_v: np.ndarray | None = None


def mixed_attention(
    target_qkv,
    source_kv: SourceKV | None,
    params: AttentionParams,
    *,
    tokens: np.ndarray | None = None,
    want_cache: bool = False,
):
    """Attention over target Q against the target+source K/V concatenation.

    ``target_qkv`` is the (Q, K, V) triple for the target branch rows
    (noise first, then text, as produced by ``project_qkv``). With a
    nonempty ``source_kv`` the key/value lists are extended by the source
    rows; with ``None`` or an empty one this is standard attention.
    """
    q, k, v = (np.asarray(t, dtype=np.float64) for t in target_qkv)
    if q.shape[1] != params.d_model or k.shape != v.shape or q.shape[1] != k.shape[1]:
        raise ShapeError(
            f"inconsistent Q/K/V shapes {q.shape}, {k.shape}, {v.shape} "
            f"for d_model {params.d_model}"
        )
    if source_kv is not None and len(source_kv) > 0:
        if source_kv.k_src.shape[1] != params.d_model:
            raise ShapeError(
                f"source K/V dim {source_kv.k_src.shape[1]} != d_model {params.d_model}"
            )
        k_full = np.concatenate([k, source_kv.k_src], axis=0)
        v_full = np.concatenate([v, source_kv.v_src], axis=0)
        n_src = len(source_kv)
    else:
        k_full, v_full, n_src = k, v, 0
    ctx, weights = _mha_core_forward(q, k_full, v_full, params.num_heads)
    out = matmul(ctx, params.w_o.T)
    if not want_cache:
        return out
    cache = AttentionCache(
        q=q, k=k, v=v, n_src=n_src, k_full=k_full, v_full=v_full,
        weights=weights, ctx=ctx, params=params,
        tokens=None if tokens is None else np.asarray(tokens, dtype=np.float64),
    )
    return out, cache


def attention_backward(cache: AttentionCache | None, grad_out: np.ndarray) -> AttentionGrads:
    """Analytic gradients of a scalar loss through ``mixed_attention``."""
    if cache is None:
        raise ContractError("attention_backward needs a cache from mixed_attention")
    if cache.consumed:
        raise ContractError("attention cache already consumed; rerun the forward pass")
    cache.consumed = True
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != cache.ctx.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != output shape {cache.ctx.shape}")
    d_ctx = matmul(grad_out, cache.params.w_o)
    d_w_o = matmul(grad_out.T, cache.ctx)
    dq, dk_full, dv_full = _mha_core_backward(
        cache.q, cache.k_full, cache.v_full, cache.weights, d_ctx, cache.params.num_heads
    )
    n_tar = cache.k.shape[0]
    grads = AttentionGrads(
        d_q=dq,
        d_k=dk_full[:n_tar],
        d_v=dv_full[:n_tar],
        d_w_o=d_w_o,
        d_k_src=dk_full[n_tar:] if cache.n_src else None,
        d_v_src=dv_full[n_tar:] if cache.n_src else None,
    )
    if cache.tokens is not None:
        x = cache.tokens
        grads.d_w_q = matmul(dq.T, x)
        grads.d_w_k = matmul(grads.d_k.T, x)
        grads.d_w_v = matmul(grads.d_v.T, x)
        grads.d_tokens = (
            matmul(dq, cache.params.w_q)
            + matmul(grads.d_k, cache.params.w_k)
            + matmul(grads.d_v, cache.params.w_v)
        )
    return grads
