"""Needle-in-a-haystack retrieval probe and rotary-base selection.

The probe plants a marker/value pair at controlled depths inside filler
context, asks the model for the token after the trailing query marker, and
scores exact matches.  ``sweep_bases`` evaluates the same frozen cases under
several rotary bases and picks the best-scoring one -- the offline selection
procedure used to chose a base before each context-extension phase.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np

from .corpus import make_needle_case
from .errors import ArgumentError
from .masking import CompressedMask
from .model import Model, forward

DEFAULT_DEPTHS = (0.0, 0.25, 0.5, 0.75, 1.0)
MAX_PROBE_CONTEXT = 65536


@dataclass
class NiahReport:
    accuracy: float
    per_depth: dict
    n_cases: int


def model_predictor(model: Model, rope_base: Optional[float] = None) -> Callable:
    """Next-token argmax at the final position, optionally under an
    overridden rotary base (evaluation-time extension)."""

    def predict(tokens: np.ndarray) -> int:
        saved = model.rope_base
        if rope_base is not None:
            model.rope_base = rope_base
        try:
            logits = forward(model, tokens, CompressedMask([len(tokens)]))
        finally:
            model.rope_base = saved
        return int(np.argmax(logits.data[-1]))

    return predict


def niah_probe(predict: Callable, context_len: int, n_cases: int,
               depths: Iterable[float] = DEFAULT_DEPTHS, vocab_size: int = 512,
               seed: int = 0, max_context: int = MAX_PROBE_CONTEXT) -> NiahReport:
    """Exact-match retrieval accuracy over n_cases haystacks per depth.

    `predict` maps a (T,) token array to the predicted next-token id.
    """
    if context_len > max_context:
        raise ArgumentError(f"context_len {context_len} exceeds limit {max_context}")
    depths = list(depths)
    if any(not 0.0 <= d <= 1.0 for d in depths):
        raise ArgumentError("depths must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    per_depth = {}
    hits_total = 0
    for depth in depths:
        hits = 0
        for _ in range(n_cases):
            value = int(rng.integers(3, vocab_size))
            tokens = make_needle_case(rng, context_len, depth, value, vocab_size)
            if predict(tokens) == value:
                hits += 1
        per_depth[depth] = hits / n_cases
        hits_total += hits
    n_total = n_cases * len(depths)
    return NiahReport(accuracy=hits_total / n_total, per_depth=per_depth, n_cases=n_total)


@dataclass
class SweepResult:
    accuracies: dict
    best_base: float
    best_accuracy: float


def sweep_bases(model: Model, bases: Iterable[float], context_len: int,
                n_cases: int, depths: Iterable[float] = DEFAULT_DEPTHS,
                seed: int = 0) -> SweepResult:
    """Probe the same cases under each base and select the best.

    The sweep should include the current base so selection can only improve
    on it.  Ties keep the earliest base in the given order.
    """
    accs = {}
    for base in bases:
        pred = model_predictor(model, rope_base=base)
        report = niah_probe(pred, context_len, n_cases, depths=depths,
                            vocab_size=model.config.vocab_size, seed=seed)
        accs[float(base)] = report.accuracy
    best_base = max(accs, key=lambda b: accs[b])
    return SweepResult(accuracies=accs, best_base=best_base, best_accuracy=accs[best_base])
