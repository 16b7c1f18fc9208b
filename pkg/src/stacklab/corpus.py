"""Synthetic corpora for desk-scale runs.

Two task families share one vocabulary layout (ids 0..2 reserved):

* ``stride_lm`` -- documents are modular arithmetic progressions; the next
  token is determined by the previous two, so the LM loss has real signal
  and its difficulty is set by the number of distinct strides.
* ``retrieval`` -- needle-in-a-haystack copy task: a marker/value pair is
  buried in filler at a controlled depth and must be reproduced after the
  trailing query token.

Generation is procedural from a seed; a corpus with ``max_documents`` set
runs dry and lets the trainer stop early with a partial log.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ArgumentError, StacklabError
from .masking import CompressedMask, DocumentPackedBatch, extract_seq_lens

EOD_ID = 0
NEEDLE_ID = 1
QUERY_ID = 2
N_RESERVED = 3


class CorpusExhausted(StacklabError):
    """A finite corpus ran out of documents."""


@dataclass
class CorpusSpec:
    kind: str = "stride_lm"
    vocab_size: int = 512
    seed: int = 0
    min_doc_len: int = 8
    max_doc_len: int = 24
    strides: tuple = (1, 2, 3, 5)
    max_documents: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("stride_lm", "retrieval"):
            raise ArgumentError(f"unknown corpus kind {self.kind!r}")
        if self.vocab_size <= N_RESERVED + 1:
            raise ArgumentError("vocab too small for reserved ids")
        if not (1 <= self.min_doc_len <= self.max_doc_len):
            raise ArgumentError("bad document length range")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["strides"] = list(self.strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        d = dict(d)
        if "strides" in d:
            d["strides"] = tuple(d["strides"])
        return cls(**d)


class SyntheticCorpus:
    """Stateful batch source; deterministic given the spec seed."""

    def __init__(self, spec: CorpusSpec):
        self.spec = spec
        self.rng = np.random.default_rng(spec.seed)
        self._docs_emitted = 0
        self._payload = spec.vocab_size - N_RESERVED

    def _next_document(self) -> np.ndarray:
        sp = self.spec
        if sp.max_documents is not None and self._docs_emitted >= sp.max_documents:
            raise CorpusExhausted(f"corpus exhausted after {self._docs_emitted} documents")
        self._docs_emitted += 1
        n = int(self.rng.integers(sp.min_doc_len, sp.max_doc_len + 1))
        start = int(self.rng.integers(0, self._payload))
        stride = int(sp.strides[self.rng.integers(0, len(sp.strides))])
        body = (start + stride * np.arange(n - 1)) % self._payload + N_RESERVED
        return np.concatenate([body, [EOD_ID]])

    def _next_retrieval_doc(self, length: int) -> np.ndarray:
        """[filler... NEEDLE value filler... QUERY value] of `length` tokens."""
        if length < 5:
            raise ArgumentError("retrieval documents need at least 5 tokens")
        depth = float(self.rng.uniform(0.0, 1.0))
        value = int(self.rng.integers(N_RESERVED, self.spec.vocab_size))
        return make_needle_case(self.rng, length - 1, depth, value,
                                self.spec.vocab_size), value

    def next_batch(self, batch_size: int, seq_len: int):
        """Pack documents into `batch_size` rows of `seq_len` tokens.

        Returns (inputs, targets, masks): int64 arrays (B, T) and one
        CompressedMask per row, built from the input positions.
        """
        sp = self.spec
        inputs = np.empty((batch_size, seq_len), dtype=np.int64)
        targets = np.empty((batch_size, seq_len), dtype=np.int64)
        masks = []
        for b in range(batch_size):
            if sp.kind == "retrieval":
                case, value = self._next_retrieval_doc(seq_len + 1)
                stream = np.concatenate([case, [value]])
            else:
                parts = []
                total = 0
                while total < seq_len + 1:
                    doc = self._next_document()
                    parts.append(doc)
                    total += len(doc)
                stream = np.concatenate(parts)[: seq_len + 1]
            inputs[b] = stream[:-1]
            targets[b] = stream[1:]
            masks.append(extract_seq_lens(DocumentPackedBatch(inputs[b], EOD_ID)))
        return inputs, targets, masks


def make_needle_case(rng, context_len: int, depth: float, value: int,
                     vocab_size: int) -> np.ndarray:
    """Haystack of `context_len` tokens with the needle pair [NEEDLE, value]
    at the given depth fraction and a trailing QUERY token."""
    if not 0.0 <= depth <= 1.0:
        raise ArgumentError("depth must lie in [0, 1]")
    if context_len < 3:
        raise ArgumentError("context must hold needle pair plus query")
    toks = rng.integers(N_RESERVED, vocab_size, size=context_len)
    # last slot is the query; needle occupies two slots inside the haystack
    slot = int(round(depth * (context_len - 3)))
    toks[slot] = NEEDLE_ID
    toks[slot + 1] = value
    toks[context_len - 1] = QUERY_ID
    return toks.astype(np.int64)
