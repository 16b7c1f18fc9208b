"""Pure-numpy implementations of the hot kernels.

Every function here has a numba twin in :mod:`stacklab.kernels.numba_backend`
with the same signature and semantics.  This module is the fallback selected
by ``STACKLAB_BACKEND=numpy`` and the reference the numba versions are tested
against.
"""

import numpy as np


def rmsnorm_fwd(x, gamma, eps):
    """Root-mean-square norm over the last axis of a 2D array.

    Returns (out, inv_rms) where inv_rms has shape (rows,) and is reused by
    the backward pass.
    """
    ms = np.mean(x * x, axis=1)
    inv_rms = 1.0 / np.sqrt(ms + eps)
    out = x * inv_rms[:, None] * gamma[None, :]
    return out, inv_rms


def rmsnorm_bwd(x, gamma, inv_rms, grad):
    """Backward of rmsnorm_fwd; returns (dx, dgamma)."""
    d = x.shape[1]
    gx = grad * gamma[None, :]
    # s = sum_i grad_i * gamma_i * x_i per row
    s = np.sum(gx * x, axis=1)
    dx = gx * inv_rms[:, None] - x * (s * inv_rms**3 / d)[:, None]
    dgamma = np.sum(grad * x * inv_rms[:, None], axis=0)
    return dx, dgamma


def swiglu_fwd(gate, up):
    sig = 1.0 / (1.0 + np.exp(-gate))
    return gate * sig * up


def swiglu_bwd(gate, up, grad):
    sig = 1.0 / (1.0 + np.exp(-gate))
    silu = gate * sig
    dsilu = sig * (1.0 + gate * (1.0 - sig))
    return grad * up * dsilu, grad * silu


def softmax_fwd(x):
    """Row softmax of a 2D array with max-subtraction for stability."""
    shifted = x - np.max(x, axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=1, keepdims=True)


def softmax_bwd(probs, grad):
    dot = np.sum(probs * grad, axis=1, keepdims=True)
    return probs * (grad - dot)


def cross_entropy_fwd(logits, targets):
    """Per-row negative log-likelihood.

    Returns (losses, probs); probs are kept for the backward pass.
    """
    shifted = logits - np.max(logits, axis=1, keepdims=True)
    e = np.exp(shifted)
    z = np.sum(e, axis=1)
    probs = e / z[:, None]
    rows = np.arange(logits.shape[0])
    losses = np.log(z) - shifted[rows, targets]
    return losses, probs


def cross_entropy_bwd(probs, targets, scale):
    dlogits = probs * scale
    rows = np.arange(probs.shape[0])
    dlogits[rows, targets] -= scale
    return dlogits


def rope_rotate(x, cos, sin):
    """Rotate adjacent pairs of the last axis by per-row angle tables.

    x is (rows, head_dim) with even head_dim; cos/sin are (rows, head_dim/2)
    in the same dtype (the caller caches them per sequence length and base;
    the inverse rotation just negates sin).
    """
    x0 = x[:, 0::2]
    x1 = x[:, 1::2]
    out = np.empty_like(x)
    out[:, 0::2] = x0 * cos - x1 * sin
    out[:, 1::2] = x0 * sin + x1 * cos
    return out


def adamw_update(p, g, m, v, lr, beta1, beta2, eps, wd, bc1, bc2):
    """One decoupled-weight-decay Adam step, in place on flat arrays.

    bc1/bc2 are the bias corrections 1-beta1**t and 1-beta2**t.  The decay
    term uses the pre-step parameter value.  Scalars arrive pre-cast to the
    array dtype so the float32 path never widens.
    """
    one = bc1 / bc1
    decay = (lr * wd) * p
    m *= beta1
    m += (one - beta1) * g
    v *= beta2
    v += (one - beta2) * (g * g)
    mhat = m / bc1
    vhat = v / bc2
    p -= lr * (mhat / (np.sqrt(vhat) + eps)) + decay


def sq_sum(x):
    """Sum of squares of a flat array, accumulated in float64."""
    return float(np.dot(x.astype(np.float64, copy=False), x.astype(np.float64, copy=False)))


def merge_pair(ids, a, b, new_id):
    """Replace non-overlapping, left-to-right occurrences of (a, b) by new_id.

    ids is a 1D int32 array of token ids; returns a new array.
    """
    if len(ids) < 2:
        return ids.copy()
    cand = np.flatnonzero((ids[:-1] == a) & (ids[1:] == b))
    if len(cand) == 0:
        return ids.copy()
    # Resolve overlaps (e.g. pair (a,a) in "aaa"): within each run of
    # consecutive candidate positions keep every other one from the left.
    run_start = np.empty(len(cand), dtype=bool)
    run_start[0] = True
    np.not_equal(cand[1:], cand[:-1] + 1, out=run_start[1:])
    run_idx = np.cumsum(run_start) - 1
    first_of_run = cand[run_start][run_idx]
    keep = cand[(cand - first_of_run) % 2 == 0]
    out = ids.copy()
    out[keep] = new_id
    return np.delete(out, keep + 1)


def encode_merges(ids, lefts, rights, news):
    """Apply merge rules in order to a 1D int32 id array.

    lefts/rights/news are parallel int32 arrays, one entry per rule.
    """
    for k in range(len(news)):
        if len(ids) < 2:
            break
        ids = merge_pair(ids, lefts[k], rights[k], news[k])
    return ids
