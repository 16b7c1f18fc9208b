"""Training machinery: AdamW, gradient clipping, learning-rate schedules.

AdamW uses decoupled weight decay (theta -= lr*wd*theta applied beside the
adaptive term, both from the pre-step value) with bias-corrected moments.
Schedules: linear warmup from zero into cosine decay, a plain cosine, and a
constant.  All state lives in plain numpy arrays keyed by parameter name so
runs serialize and reproduce exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ArgumentError, ConfigError, NumericError


@dataclass
class OptimHyper:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    clip_norm: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")


@dataclass
class AdamWState:
    """First/second moments plus the shared step counter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict, grads: dict, state: AdamWState, hp: OptimHyper,
               lr: float) -> AdamWState:
    """Update `params` in place from `grads` (both name -> array).

    Non-finite gradients abort the step before any mutation; params and
    state come back unchanged in that case.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name!r}; step aborted")
        if params[name].shape != g.shape:
            raise ArgumentError(f"gradient shape mismatch for {name!r}")
    t = state.step + 1
    bc1 = 1.0 - hp.beta1**t
    bc2 = 1.0 - hp.beta2**t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        # pre-cast scalars so the kernel runs entirely in the array dtype
        cast = p.dtype.type
        kernels.adamw_update(p.reshape(-1), np.ascontiguousarray(g.reshape(-1)),
                             state.m[name].reshape(-1), state.v[name].reshape(-1),
                             cast(lr), cast(hp.beta1), cast(hp.beta2), cast(hp.eps),
                             cast(hp.weight_decay), cast(bc1), cast(bc2))
    state.step = t
    return state


def global_grad_norm(grads: dict) -> float:
    total = 0.0
    for g in grads.values():
        total += kernels.sq_sum(np.ascontiguousarray(g.reshape(-1)))
    return math.sqrt(total)


def clip_grads(grads: dict, max_norm: float):
    """Scale all gradients by max_norm/norm when the global L2 norm exceeds
    max_norm.  Returns (grads, global_norm); scaling happens in place."""
    if max_norm <= 0:
        raise ArgumentError("max_norm must be positive")
    norm = global_grad_norm(grads)
    if not math.isfinite(norm):
        raise NumericError("non-finite gradient norm")
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return grads, norm


# ---------------------------------------------------------------------------
# Learning-rate schedules
# ---------------------------------------------------------------------------

SCHEDULE_KINDS = ("warmup_cosine", "cosine", "constant")


@dataclass
class LrSchedule:
    kind: str
    lr_max: float
    lr_min: float = 0.0
    warmup_steps: int = 0
    total_steps: int = 0

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if self.lr_min > self.lr_max:
            raise ConfigError("lr_min must not exceed lr_max")
        if self.kind != "constant" and self.warmup_steps > self.total_steps:
            raise ConfigError("warmup_steps must not exceed total_steps")

    @classmethod
    def pretrain_reference(cls) -> "LrSchedule":
        """Cosine 1e-4 -> 1e-5 with 4,000 warmup steps, as published."""
        return cls(kind="warmup_cosine", lr_max=1e-4, lr_min=1e-5,
                   warmup_steps=4000, total_steps=100_000)


def lr_at(step: int, schedule: LrSchedule) -> float:
    """Learning rate at an integer step.

    Warmup is linear from 0, reaching lr_max exactly at warmup_steps; the
    cosine then decays to lr_min at total_steps.
    """
    if schedule.kind == "constant":
        if step < 0:
            raise ArgumentError("step must be >= 0")
        return schedule.lr_max
    if step < 0 or step > schedule.total_steps:
        raise ArgumentError(f"step {step} outside [0, {schedule.total_steps}]")
    w = schedule.warmup_steps if schedule.kind == "warmup_cosine" else 0
    if step < w:
        return schedule.lr_max * step / w
    span = schedule.total_steps - w
    if span == 0:
        return schedule.lr_max
    progress = (step - w) / span
    return schedule.lr_min + 0.5 * (schedule.lr_max - schedule.lr_min) * (1.0 + math.cos(math.pi * progress))
