"""Dense-tensor arithmetic with tape-based reverse-mode differentiation.

Covers exactly the operation set the model core needs (matmul, add, mul,
rmsnorm, swiglu, softmax, embedding lookup, rotary rotation, reductions,
shape moves) plus a finite-difference gradient-check harness.  Everything
runs on numpy arrays; float64 is the default and the only dtype used by
verification paths.  float32 is available for speed.

Gradients accumulate additively at fan-out points, in reverse execution
order, so repeated runs are bit-identical.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import ArgumentError, ConfigError, DimensionError, NumericError

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A dense array plus gradient bookkeeping.

    `data` is always a numpy float array; `grad` is filled in by
    GradTape.backward for tensors with requires_grad=True.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class TapeNode:
    inputs: tuple
    output: Tensor
    backward: Callable


class GradTape:
    """Records operations for one reverse-mode pass.

    Ops append nodes in execution order while the tape is active (a context
    manager); backward replays the list once, in reverse.  Tapes are
    independent: a tape is only ever touched by the thread that opened it.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self):
        _STATE.tapes.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _STATE.tapes.pop()
        assert popped is self
        return False

    def record(self, inputs, output, backward):
        self.nodes.append(TapeNode(tuple(inputs), output, backward))

    def _run_backward(self, output: Tensor, seed) -> dict:
        grads: dict[int, np.ndarray] = {}
        if seed is None:
            seed = np.ones_like(output.data)
        grads[id(output)] = np.asarray(seed, dtype=output.data.dtype)
        for node in reversed(self.nodes):
            gout = grads.get(id(node.output))
            if gout is None:
                continue
            gins = node.backward(gout)
            for tensor, g in zip(node.inputs, gins):
                if g is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] += g
                else:
                    # Own the buffer: backward fns may hand back views or the
                    # upstream grad itself, which later += would corrupt.
                    grads[key] = g.copy() if (g.base is not None or g is gout) else g
        return grads

    def backward(self, output: Tensor, seed=None):
        """Propagate d(output)/d(tensor) to every recorded tensor.

        Sets `.grad` on tensors with requires_grad=True (None when the
        tensor did not contribute to `output`).  `seed` defaults to ones,
        i.e. the gradient of output.sum().
        """
        grads = self._run_backward(output, seed)
        for node in self.nodes:
            for tensor in node.inputs:
                if tensor.requires_grad:
                    tensor.grad = grads.get(id(tensor))
        if output.requires_grad:
            output.grad = grads.get(id(output))

    def gradients(self, output: Tensor, wrt: Sequence[Tensor], seed=None):
        """Return gradients of `output` w.r.t. each tensor in `wrt`."""
        grads = self._run_backward(output, seed)
        out = []
        for t in wrt:
            g = grads.get(id(t))
            out.append(g if g is not None else np.zeros_like(t.data))
        return out


class _TapeState(threading.local):
    def __init__(self):
        self.tapes = []


_STATE = _TapeState()


def _active_tape():
    return _STATE.tapes[-1] if _STATE.tapes else None


def _result(inputs, out_data, backward):
    req = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=req)
    tape = _active_tape()
    if tape is not None and req:
        tape.record(inputs, out, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise and shape ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result((a, b), out, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result((a, b), out, backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        return (g * c,)

    return _result((a,), a.data * c, backward)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape

    def backward(g):
        return (g.reshape(old),)

    return _result((a,), a.data.reshape(shape), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inv),)

    return _result((a,), a.data.transpose(axes), backward)


def repeat_heads(a: Tensor, repeats: int) -> Tensor:
    """Repeat the head axis (-2) `repeats` times; used to expand KV heads
    across their query-head group."""
    out = np.repeat(a.data, repeats, axis=-2)
    k = a.shape[-2]

    def backward(g):
        shaped = g.reshape(g.shape[:-2] + (k, repeats, g.shape[-1]))
        return (shaped.sum(axis=-2),)

    return _result((a,), out, backward)


# ---------------------------------------------------------------------------
# Matmul
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supports (..., m, k) @ (k, n) -- the linear-layer case -- and equal-rank
    stacked products (batch..., m, k) @ (batch..., k, n).
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError("matmul requires at least 2D operands")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    if bd.ndim == 2:

        def backward(g):
            da = g @ bd.swapaxes(-1, -2)
            k, n = bd.shape
            db = ad.reshape(-1, k).T @ g.reshape(-1, n)
            return da, db

        return _result((a, b), ad @ bd, backward)
    if ad.ndim != bd.ndim or ad.shape[:-2] != bd.shape[:-2]:
        raise DimensionError(f"matmul: batch dims differ, {a.shape} @ {b.shape}")

    def backward(g):
        da = g @ bd.swapaxes(-1, -2)
        db = ad.swapaxes(-1, -2) @ g
        return da, db

    return _result((a, b), ad @ bd, backward)


# ---------------------------------------------------------------------------
# Normalization / activation primitives (kernel-backed)
# ---------------------------------------------------------------------------


def rmsnorm(x: Tensor, gamma: Tensor, eps: float = 1e-6) -> Tensor:
    """gamma * x / sqrt(mean(x^2) + eps) along the last axis."""
    if eps < 0:
        raise ArgumentError("rmsnorm: eps must be >= 0")
    if gamma.ndim != 1 or x.shape[-1] != gamma.shape[0]:
        raise DimensionError(
            f"rmsnorm: last dim of x {x.shape} must match gamma {gamma.shape}"
        )
    if not np.all(np.isfinite(x.data)):
        raise NumericError("rmsnorm: non-finite input")
    d = x.shape[-1]
    x2 = np.ascontiguousarray(x.data.reshape(-1, d))
    g1 = np.ascontiguousarray(gamma.data)
    out, inv_rms = kernels.rmsnorm_fwd(x2, g1, float(eps))

    def backward(g):
        g2 = np.ascontiguousarray(g.reshape(-1, d))
        dx, dgamma = kernels.rmsnorm_bwd(x2, g1, inv_rms, g2)
        return dx.reshape(x.shape), dgamma

    return _result((x, gamma), out.reshape(x.shape), backward)


def swiglu(gate: Tensor, up: Tensor) -> Tensor:
    """silu(gate) * up, elementwise."""
    if gate.shape != up.shape:
        raise DimensionError(f"swiglu: shapes differ, {gate.shape} vs {up.shape}")
    out = kernels.swiglu_fwd(gate.data, up.data)

    def backward(g):
        return kernels.swiglu_bwd(gate.data, up.data, g)

    return _result((gate, up), out, backward)


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.shape[-1] == 0:
        raise DimensionError("softmax over empty dimension")
    k = x.shape[-1]
    probs = kernels.softmax_fwd(np.ascontiguousarray(x.data.reshape(-1, k)))

    def backward(g):
        dx = kernels.softmax_bwd(probs, np.ascontiguousarray(g.reshape(-1, k)))
        return (dx.reshape(x.shape),)

    return _result((x,), probs.reshape(x.shape), backward)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ArgumentError("embedding_lookup: id out of range")
    out = table.data[ids]

    def backward(g):
        dtab = np.zeros_like(table.data)
        np.add.at(dtab, ids.ravel(), g.reshape(-1, table.shape[1]))
        return (dtab,)

    return _result((table,), out, backward)


_ROPE_CACHE: dict = {}
_ROPE_CACHE_MAX = 32


def _rope_tables(positions: np.ndarray, base: float, lead: int, heads: int,
                 hd: int, dtype) -> tuple:
    """Per-row cos/sin/-sin tables for shape (lead, T, heads, hd), cached.

    Angles for pair i are pos * base**(-2i/hd); training reuses the same
    (T, base) for thousands of steps, so the trig is computed once.
    """
    key = (positions.tobytes(), float(base), lead, heads, hd, np.dtype(dtype).str)
    hit = _ROPE_CACHE.get(key)
    if hit is not None:
        return hit
    half = hd // 2
    inv_freq = float(base) ** (-2.0 * np.arange(half) / hd)
    ang = positions.astype(np.float64)[:, None] * inv_freq[None, :]  # (T, half)
    cos = np.cos(ang)
    sin = np.sin(ang)

    def rows(a):
        full = np.broadcast_to(a[None, :, None, :], (lead, len(positions), heads, half))
        return np.ascontiguousarray(full.reshape(-1, half).astype(dtype))

    entry = (rows(cos), rows(sin), rows(-sin))
    if len(_ROPE_CACHE) >= _ROPE_CACHE_MAX:
        _ROPE_CACHE.clear()
    _ROPE_CACHE[key] = entry
    return entry


def rope_apply(x: Tensor, positions: np.ndarray, base: float) -> Tensor:
    """Rotary rotation of query/key vectors.

    x has shape (..., T, heads, head_dim); adjacent pairs of the last axis
    rotate by angle pos * base**(-2i/head_dim).
    """
    hd = x.shape[-1]
    if hd % 2 != 0:
        raise ConfigError("rope: head_dim must be even")
    positions = np.asarray(positions, dtype=np.float64)
    t_axis = x.ndim - 3
    if positions.shape != (x.shape[t_axis],):
        raise DimensionError("rope: positions must match the sequence axis")
    heads = x.shape[-2]
    lead = int(np.prod(x.shape[:t_axis], dtype=np.int64)) if t_axis > 0 else 1
    cos, sin, neg_sin = _rope_tables(positions, base, lead, heads, hd, x.dtype)
    x2 = np.ascontiguousarray(x.data.reshape(-1, hd))
    out = kernels.rope_rotate(x2, cos, sin)

    def backward(g):
        g2 = np.ascontiguousarray(g.reshape(-1, hd))
        dx = kernels.rope_rotate(g2, cos, neg_sin)
        return (dx.reshape(x.shape),)

    return _result((x,), out.reshape(x.shape), backward)


# ---------------------------------------------------------------------------
# Reductions and loss
# ---------------------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _result((x,), np.sum(x.data), backward)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def backward(g):
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype),)

    return _result((x,), np.sum(x.data) / n, backward)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer targets over the last axis."""
    v = logits.shape[-1]
    targets = np.ascontiguousarray(np.asarray(targets).ravel(), dtype=np.int64)
    flat = np.ascontiguousarray(logits.data.reshape(-1, v))
    if flat.shape[0] != targets.shape[0]:
        raise DimensionError("cross_entropy: targets do not match logits rows")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ArgumentError("cross_entropy: target id out of range")
    losses, probs = kernels.cross_entropy_fwd(flat, targets)
    n = losses.shape[0]

    def backward(g):
        dlogits = kernels.cross_entropy_bwd(probs, targets, float(g) / n)
        return (dlogits.reshape(logits.shape),)

    return _result((logits,), np.sum(losses) / n, backward)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    worst_input: int
    worst_coord: int


def grad_check(f, inputs: Sequence[Tensor], step: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare reverse-mode gradients of a scalar-valued `f` against central
    finite differences, coordinate by coordinate.

    rel_err = |a - n| / max(|a|, |n|, 1e-8).  Inputs must be float64; the
    perturbation is applied in place and restored.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise ArgumentError("grad_check requires float64 inputs")
        t.requires_grad = True
    with GradTape() as tape:
        out = f(*inputs)
        if out.data.ndim != 0:
            raise ArgumentError("grad_check: f must return a scalar")
        tape.backward(out)
    analytic = []
    for i, t in enumerate(inputs):
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        bad = np.flatnonzero(~np.isfinite(g.ravel()))
        if bad.size:
            raise NumericError(f"non-finite gradient at input {i}, coordinate {int(bad[0])}")
        analytic.append(g)

    max_rel = 0.0
    worst = (0, 0)
    for i, t in enumerate(inputs):
        flat = t.data.ravel()
        aflat = analytic[i].ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            hi = float(f(*inputs).data)
            flat[j] = orig - step
            lo = float(f(*inputs).data)
            flat[j] = orig
            numeric = (hi - lo) / (2.0 * step)
            a = float(aflat[j])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if rel > max_rel:
                max_rel = rel
                worst = (i, j)
    return GradCheckReport(max_rel_err=max_rel, passed=max_rel <= tol,
                           worst_input=worst[0], worst_coord=worst[1])
