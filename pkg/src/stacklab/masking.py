"""Reset-attention-mask handling for document-packed sequences.

A packed sequence concatenates documents separated by an end-of-document
token.  Attention must stay inside each document, so instead of a full TxT
boolean mask we carry only the per-document lengths (the compressed form)
and expand on demand by stitching blocks out of a shared lower-triangular
template.

Boundary convention (not dictated by the source material): the eod token
belongs to the document it terminates, attends within that document and can
be attended to.  A trailing run of tokens without a final eod forms a last
document.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import kernels
from .errors import ArgumentError, ResourceError

DEFAULT_TEMPLATE_SIDE = 2048
MAX_EXPANDED_SIDE = 65536

# Large negative instead of -inf: the softmax subtracts the row max first and
# inf - inf would poison rows.
MASK_NEG = -1e30


@dataclass
class DocumentPackedBatch:
    """A token stream with documents delimited by `eod_id`."""

    tokens: np.ndarray
    eod_id: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens)
        if self.tokens.ndim != 1 or self.tokens.size < 1:
            raise ArgumentError("DocumentPackedBatch requires a nonempty 1D token stream")


@dataclass
class CompressedMask:
    """Per-document lengths; the O(#docs) stand-in for a TxT mask."""

    seq_lens: list[int]

    def __post_init__(self):
        self.seq_lens = [int(n) for n in self.seq_lens]
        if not self.seq_lens or any(n < 1 for n in self.seq_lens):
            raise ArgumentError("CompressedMask lengths must be >= 1")

    @property
    def total(self) -> int:
        return sum(self.seq_lens)

    def to_json(self) -> str:
        return json.dumps(self.seq_lens)

    @classmethod
    def from_json(cls, text: str) -> "CompressedMask":
        return cls(json.loads(text))

    def doc_ids(self) -> np.ndarray:
        """Document index of every position, shape (total,)."""
        return np.repeat(np.arange(len(self.seq_lens)), self.seq_lens)


@dataclass
class MaskTemplate:
    """Shared lower-triangular template used to stitch expanded masks."""

    side: int = DEFAULT_TEMPLATE_SIDE
    _tri: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.side < 1:
            raise ArgumentError("template side must be >= 1")
        self._tri = np.tril(np.ones((self.side, self.side), dtype=bool))

    def causal_block(self, n: int) -> np.ndarray:
        """Causal mask of size n, cut from the template or tiled beyond it."""
        if n <= self.side:
            return self._tri[:n, :n]
        out = np.zeros((n, n), dtype=bool)
        s = self.side
        for a in range(0, n, s):
            ah = min(s, n - a)
            out[a : a + ah, :a] = True  # tiles left of the diagonal are full
            out[a : a + ah, a : a + ah] = self._tri[:ah, :ah]
        return out


@lru_cache(maxsize=4)
def _template(side: int) -> MaskTemplate:
    return MaskTemplate(side)


def extract_seq_lens(batch: DocumentPackedBatch) -> CompressedMask:
    """Split the stream after each eod token; the remainder forms a final
    document."""
    eod_pos = np.flatnonzero(batch.tokens == batch.eod_id)
    bounds = np.concatenate([[-1], eod_pos])
    lens = list(np.diff(bounds))
    tail = batch.tokens.size - 1 - (eod_pos[-1] if eod_pos.size else -1)
    if tail > 0:
        lens.append(tail)
    return CompressedMask([int(n) for n in lens])


def expand_mask(mask: CompressedMask, template_side: int = DEFAULT_TEMPLATE_SIDE,
                max_side: int = MAX_EXPANDED_SIDE) -> np.ndarray:
    """Expand to the full boolean mask: allowed(q, k) iff q and k sit in the
    same document and k <= q."""
    t = mask.total
    if t > max_side:
        raise ResourceError(f"expanded mask side {t} exceeds limit {max_side}")
    tpl = _template(template_side)
    out = np.zeros((t, t), dtype=bool)
    off = 0
    for n in mask.seq_lens:
        out[off : off + n, off : off + n] = tpl.causal_block(n)
        off += n
    return out


def mask_bias(mask: CompressedMask, dtype=np.float64) -> np.ndarray:
    """Additive attention bias: 0 where allowed, MASK_NEG where not."""
    allowed = expand_mask(mask)
    bias = np.zeros(allowed.shape, dtype=dtype)
    bias[~allowed] = MASK_NEG
    return bias


def masked_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                     mask: CompressedMask, scale: float | None = None) -> np.ndarray:
    """Softmax attention over a packed sequence.

    q, k, v have shape (T, heads, head_dim).  Disallowed logits receive a
    large negative bias, so the result equals running causal attention on
    each document independently and concatenating.
    """
    if any(n < 1 for n in mask.seq_lens):
        raise ArgumentError("masked_attention: zero-length document")
    t, h, hd = q.shape
    if k.shape != q.shape or v.shape != q.shape:
        raise ArgumentError("masked_attention: q, k, v must share a shape")
    if mask.total != t:
        raise ArgumentError(f"masked_attention: mask covers {mask.total} of {t} positions")
    if scale is None:
        scale = 1.0 / np.sqrt(hd)
    qh = q.transpose(1, 0, 2)
    kh = k.transpose(1, 0, 2)
    vh = v.transpose(1, 0, 2)
    logits = (qh @ kh.transpose(0, 2, 1)) * scale
    logits = logits + mask_bias(mask, dtype=logits.dtype)[None, :, :]
    probs = kernels.softmax_fwd(np.ascontiguousarray(logits.reshape(-1, t)))
    out = probs.reshape(h, t, t) @ vh
    return out.transpose(1, 0, 2)
