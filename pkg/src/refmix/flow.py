"""Rectified-flow objective, Euler sampling, adapter training, and the
dual-branch paired generator.

The model predicts the velocity (data minus noise) along the straight
interpolation path; sampling integrates it with plain Euler steps from
t=1 down to t=0. Training touches only adapter matrices; the trunk stays
frozen.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import SourceKV
from .dit import (
    DiTParams,
    PackedSequence,
    dit_backward,
    dit_forward,
    embed_latent_grid,
    embed_text,
    lora_gate,
    pack_sequence,
    training_step_guard,
)
from .encoding import EncodingScheme
from .errors import ContractError, ShapeError
from .lora import LoRAAdapter
from .tensor import SeededRng


@dataclass(frozen=True)
class TrainingHyperparams:
    """Published-scale defaults; use ``desk_scale`` for anything runnable here."""

    batch_size: int = 16
    learning_rate: float = 5e-6

    def __post_init__(self):
        if self.batch_size < 1 or self.learning_rate <= 0:
            raise ContractError(
                f"hyperparams must be positive, got batch_size={self.batch_size}, "
                f"learning_rate={self.learning_rate}"
            )

    @classmethod
    def desk_scale(cls) -> "TrainingHyperparams":
        # lr chosen so 200 steps on the fixed 4-sample toy batch cut the
        # loss well below half (verified across seeds before freezing).
        return cls(batch_size=4, learning_rate=0.25)


@dataclass(frozen=True)
class SamplerConfig:
    steps: int
    seed: int
    schedule: tuple[float, ...] = ()

    def __post_init__(self):
        if self.steps < 1:
            raise ContractError(f"steps must be >= 1, got {self.steps}")
        sched = self.schedule or tuple(np.linspace(1.0, 0.0, self.steps + 1))
        if len(sched) != self.steps + 1 or sched[0] != 1.0 or sched[-1] != 0.0:
            raise ContractError(f"schedule must run 1 -> 0 over steps+1 points, got {sched}")
        if any(b >= a for a, b in zip(sched, sched[1:])):
            raise ContractError("schedule must be strictly decreasing")
        object.__setattr__(self, "schedule", tuple(float(t) for t in sched))


@dataclass
class Condition:
    """Conditioning for one generation: text plus clean reference latents."""

    text_emb: np.ndarray
    ref_latents: list[np.ndarray] = field(default_factory=list)
    scheme: EncodingScheme = EncodingScheme()


@dataclass
class FlowSample:
    """One training example: endpoints of the interpolation plus condition."""

    x0: np.ndarray  # noise endpoint (h, w, c)
    x1: np.ndarray  # data endpoint (h, w, c)
    condition: Condition

    def __post_init__(self):
        if self.x0.shape != self.x1.shape:
            raise ShapeError(f"x0/x1 shapes differ: {self.x0.shape} vs {self.x1.shape}")


def pack_for_condition(
    params: DiTParams, latent: np.ndarray, condition: Condition
) -> PackedSequence:
    refs = [embed_latent_grid(params, r) for r in condition.ref_latents]
    return pack_sequence(
        condition.text_emb, embed_latent_grid(params, latent), refs, condition.scheme
    )


def flow_matching_loss(
    params: DiTParams,
    adapters: LoRAAdapter | None,
    batch: list[FlowSample],
    ts: list[float],
    predictor=None,
) -> float:
    """Mean squared error between predicted and target velocity.

    ``predictor(sample, x_t, t)`` overrides the model, which lets tests
    pin the loss of an oracle or a zero predictor.
    """
    if not batch:
        raise ContractError("batch must be nonempty")
    if len(ts) != len(batch):
        raise ContractError(f"need one t per sample: {len(ts)} vs {len(batch)}")
    total = 0.0
    count = 0
    for sample, t in zip(batch, ts):
        x_t = (1.0 - t) * sample.x0 + t * sample.x1
        target = sample.x1 - sample.x0
        if predictor is not None:
            v = predictor(sample, x_t, t)
        else:
            packed = pack_for_condition(params, x_t, sample.condition)
            v = dit_forward(packed, params, adapters, t)
        total += float(np.sum((v - target) ** 2))
        count += target.size
    return total / count


def train_step(
    params: DiTParams,
    adapters: LoRAAdapter,
    batch: list[FlowSample],
    lr: float,
    ts: list[float],
    step: int = 0,
) -> tuple[LoRAAdapter, float]:
    """One gradient-descent update of the adapter matrices only.

    Returns a fresh adapter; inputs are left untouched. Samples whose
    sequence has no reference span contribute loss through the base
    weights but no adapter gradient (the gate is off for them).
    """
    if len(ts) != len(batch):
        raise ContractError(f"need one t per sample: {len(ts)} vs {len(batch)}")
    accum: dict[str, np.ndarray] = {}
    total = 0.0
    count = sum(s.x1.size for s in batch)
    for sample, t in zip(batch, ts):
        x_t = (1.0 - t) * sample.x0 + t * sample.x1
        target = sample.x1 - sample.x0
        packed = pack_for_condition(params, x_t, sample.condition)
        v, cache = dit_forward(packed, params, adapters, t, want_cache=True)
        total += float(np.sum((v - target) ** 2))
        if not lora_gate(packed):
            continue
        d_v = 2.0 * (v - target) / count
        grads = dit_backward(cache, d_v, params)
        for name, (ga, gb) in grads.adapter_grads().items():
            key_a, key_b = name + ".a", name + ".b"
            accum[key_a] = accum.get(key_a, 0.0) + ga
            accum[key_b] = accum.get(key_b, 0.0) + gb
    loss = total / count
    training_step_guard(loss, step)
    updated = adapters.copy()
    for name, (a, b) in updated.targets.items():
        if name + ".a" in accum:
            a -= lr * accum[name + ".a"]
            b -= lr * accum[name + ".b"]
    return updated, loss


def euler_sample(
    config: SamplerConfig,
    params: DiTParams,
    adapters: LoRAAdapter | None,
    condition: Condition,
) -> np.ndarray:
    """Integrate the velocity field from seeded noise down to t=0."""
    shape = (params.config.latent.height, params.config.latent.width, params.config.latent.channels)
    rng = SeededRng(config.seed)
    x = rng.normal(shape)
    sched = config.schedule
    for k in range(config.steps):
        packed = pack_for_condition(params, x, condition)
        v = dit_forward(packed, params, adapters, sched[k])
        x = x + (sched[k + 1] - sched[k]) * v
    return x


def dual_branch_generate(
    params: DiTParams,
    prompt_tar: str,
    prompt_src: str,
    config: SamplerConfig,
    *,
    mixing: bool = True,
    scheme: EncodingScheme = EncodingScheme(),
    adapters: LoRAAdapter | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Generate a (target, source) latent pair in lock-step.

    The source branch always runs standard attention; when mixing is on,
    its per-layer noise K/V are captured after each source forward and
    injected into the target branch's attention at the same layer and the
    same timestep. Injection is one-directional: the source trajectory
    never depends on the target or on the mixing flag.
    """
    cfg = params.config
    shape = (cfg.latent.height, cfg.latent.width, cfg.latent.channels)
    rng = SeededRng(config.seed)
    x_tar = rng.normal(shape)
    x_src = rng.normal(shape)
    cond_tar = Condition(embed_text(prompt_tar, cfg.d_model, cfg.max_text_len), [], scheme)
    cond_src = Condition(embed_text(prompt_src, cfg.d_model, cfg.max_text_len), [], scheme)
    sched = config.schedule
    for k in range(config.steps):
        t = sched[k]
        dt = sched[k + 1] - sched[k]
        packed_src = pack_for_condition(params, x_src, cond_src)
        v_src, captured = dit_forward(packed_src, params, adapters, t, capture_kv=True)
        source_kvs: list[SourceKV] | None = captured if mixing else None
        packed_tar = pack_for_condition(params, x_tar, cond_tar)
        v_tar = dit_forward(packed_tar, params, adapters, t, source_kvs=source_kvs)
        x_src = x_src + dt * v_src
        x_tar = x_tar + dt * v_tar
    return x_tar, x_src
