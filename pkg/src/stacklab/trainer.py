"""Phase-driven training loop with spike detection and JSONL run logs.

A PhasePlan is an ordered list of phases, each with a token budget, sequence
length, rotary base, batch-size ramp and LR schedule -- token-based
accounting mirrors how large pretraining runs are described.  The loop is
single threaded and bit-reproducible given the model seed and corpus seed.

Steps whose gradients come back non-finite are logged and skipped (state
untouched) so that an unstable configuration still yields a complete,
comparable log instead of aborting the experiment.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .corpus import CorpusExhausted, SyntheticCorpus
from .errors import ArgumentError, ConfigError, NumericError
from .model import Model, forward
from .optim import AdamWState, LrSchedule, OptimHyper, adamw_step, clip_grads, lr_at
from .tensor import GradTape


@dataclass
class Phase:
    token_budget: int
    seq_len: int
    rope_base: float
    batch_ramp: list  # [(tokens_seen threshold, batch size), ...]
    schedule: LrSchedule

    def __post_init__(self):
        if self.token_budget <= 0:
            raise ConfigError("token_budget must be positive")
        if not self.batch_ramp:
            raise ConfigError("batch_ramp must not be empty")
        thresholds = [t for t, _ in self.batch_ramp]
        if thresholds != sorted(thresholds) or len(set(thresholds)) != len(thresholds):
            raise ConfigError("batch ramp thresholds must be increasing")

    def batch_size_at(self, tokens_seen: int) -> int:
        size = self.batch_ramp[0][1]
        for threshold, bs in self.batch_ramp:
            if tokens_seen >= threshold:
                size = bs
        return size


@dataclass
class PhasePlan:
    phases: list

    def __post_init__(self):
        if not self.phases:
            raise ConfigError("plan needs at least one phase")

    @classmethod
    def reference_pretrain(cls) -> "PhasePlan":
        """The published five-phase plan (4K/4K/8K/32K/128K), as data.

        Token budgets are in actual tokens; this preset documents the
        schedule and is exercised structurally, never trained at desk scale.
        """
        t = int(1e12)
        return cls(phases=[
            Phase(token_budget=int(7.4 * t), seq_len=4096, rope_base=1.0e4,
                  batch_ramp=[(0, 1024), (int(1.2 * t), 1536), (int(1.9 * t), 2048)],
                  schedule=LrSchedule("warmup_cosine", lr_max=1e-4, lr_min=1e-5,
                                      warmup_steps=4000, total_steps=450_000)),
            Phase(token_budget=int(4.6 * t), seq_len=4096, rope_base=1.0e4,
                  batch_ramp=[(0, 2048)],
                  schedule=LrSchedule("constant", lr_max=1e-5)),
            Phase(token_budget=int(0.8 * t), seq_len=8192, rope_base=1.0e5,
                  batch_ramp=[(0, 1536)],
                  schedule=LrSchedule("cosine", lr_max=1e-5, lr_min=7.5e-6,
                                      total_steps=65_000)),
            Phase(token_budget=int(0.4 * t), seq_len=32768, rope_base=1.6e6,
                  batch_ramp=[(0, 384)],
                  schedule=LrSchedule("constant", lr_max=7.5e-6)),
            Phase(token_budget=int(0.1 * t), seq_len=131072, rope_base=2.56e7,
                  batch_ramp=[(0, 96)],
                  schedule=LrSchedule("constant", lr_max=7.5e-6)),
        ])


# ---------------------------------------------------------------------------
# Loss-spike detection
# ---------------------------------------------------------------------------


@dataclass
class SpikeDetector:
    """Robust spike rule: loss_t > median(window) + k * (1.4826 * MAD)."""

    window: int = 50
    threshold: float = 6.0

    def __post_init__(self):
        if self.window < 2:
            raise ConfigError("window must be >= 2")


@dataclass
class SpikeEvent:
    step: int
    loss: float
    median: float
    limit: float


def detect_spike(losses, detector: SpikeDetector):
    """Scan a loss series; returns one event per flagged step."""
    losses = np.asarray(losses, dtype=np.float64)
    w = detector.window
    events = []
    for t in range(w, len(losses)):
        ref = losses[t - w : t]
        med = float(np.median(ref))
        mad = float(np.median(np.abs(ref - med)))
        limit = med + detector.threshold * 1.4826 * mad
        if losses[t] > limit:
            events.append(SpikeEvent(step=t, loss=float(losses[t]), median=med, limit=limit))
    return events


# ---------------------------------------------------------------------------
# Run log
# ---------------------------------------------------------------------------


@dataclass
class RunLog:
    """Meta events plus one record per step; serializes to JSON lines."""

    entries: list = field(default_factory=list)

    def add(self, entry: dict):
        self.entries.append(entry)

    @property
    def steps(self) -> list:
        return [e for e in self.entries if "step" in e]

    def losses(self) -> np.ndarray:
        return np.array([e["loss"] for e in self.steps], dtype=np.float64)

    def grad_norms(self) -> np.ndarray:
        return np.array([e["grad_norm"] for e in self.steps], dtype=np.float64)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.entries)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())

    @classmethod
    def load(cls, path) -> "RunLog":
        log = cls()
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    log.add(json.loads(line))
        return log


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def run_phase_plan(plan: PhasePlan, model: Model, corpus: SyntheticCorpus,
                   hp: Optional[OptimHyper] = None,
                   sink: Optional[Callable[[dict], None]] = None,
                   max_steps: Optional[int] = None) -> RunLog:
    """Train through every phase; returns the step-by-step log.

    Batch ramps fire on global tokens seen.  The rotary base switches at
    each phase boundary.  Exhausting a finite corpus ends the run cleanly
    with the partial log.
    """
    hp = hp or OptimHyper()
    log = RunLog()
    params = {name: t for name, t in model.named_params()}
    for t in params.values():
        t.requires_grad = True
    arrays = {name: t.data for name, t in params.items()}
    state = AdamWState()
    tokens_seen = 0
    global_step = 0

    def emit(entry):
        log.add(entry)
        if sink is not None:
            sink(entry)

    emit({"event": "run_start", "n_params": model.num_params(),
          "norm_scheme": model.config.norm_scheme,
          "init_scheme": model.config.init_scheme})
    try:
        for phase_idx, phase in enumerate(plan.phases):
            model.rope_base = phase.rope_base
            emit({"event": "phase_start", "phase": phase_idx,
                  "rope_base": phase.rope_base, "seq_len": phase.seq_len,
                  "token_budget": phase.token_budget})
            phase_tokens = 0
            step_in_phase = 0
            while phase_tokens < phase.token_budget:
                if max_steps is not None and global_step >= max_steps:
                    return log
                batch_size = phase.batch_size_at(tokens_seen)
                inputs, targets, masks = corpus.next_batch(batch_size, phase.seq_len)
                sched = phase.schedule
                cap = sched.total_steps if sched.kind != "constant" else step_in_phase
                lr = lr_at(min(step_in_phase, cap), sched)

                skipped = False
                try:
                    with GradTape() as tape:
                        logits = forward(model, inputs, masks)
                        loss = T.cross_entropy(logits, targets)
                        glist = tape.gradients(loss, list(params.values()))
                    grads = dict(zip(params.keys(), glist))
                    grads, norm = clip_grads(grads, hp.clip_norm)
                    adamw_step(arrays, grads, state, hp, lr)
                    loss_val = float(loss.data)
                except NumericError:
                    # unstable step: keep params, record, move on
                    skipped = True
                    loss_val = float("nan")
                    norm = float("nan")

                tokens_seen += batch_size * phase.seq_len
                phase_tokens += batch_size * phase.seq_len
                record = {
                    "step": global_step,
                    "tokens_seen": tokens_seen,
                    "loss": loss_val,
                    "grad_norm": norm,
                    "lr": lr,
                    "batch_size": batch_size,
                }
                if skipped:
                    record["skipped"] = True
                emit(record)
                global_step += 1
                step_in_phase += 1
    except CorpusExhausted:
        emit({"event": "early_stop", "reason": "data_exhausted", "step": global_step})
    emit({"event": "run_end", "steps": global_step, "tokens_seen": tokens_seen})
    return log


def grad_norm_cov(log: RunLog) -> float:
    """Coefficient of variation (std/mean) of the logged gradient norms."""
    norms = log.grad_norms()
    norms = norms[np.isfinite(norms)]
    if len(norms) == 0 or norms.mean() == 0:
        return math.inf
    return float(norms.std() / norms.mean())
