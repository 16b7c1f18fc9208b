"""Numba-jitted twins of the kernels in numpy_backend.

Loops are written out explicitly; summations run sequentially over the last
axis so results are reproducible bit-for-bit between runs.  fastmath stays
off to keep IEEE semantics.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def rmsnorm_fwd(x, gamma, eps):
    n, d = x.shape
    out = np.empty_like(x)
    inv_rms = np.empty(n, dtype=x.dtype)
    # element arithmetic stays in the array dtype so the f32 path vectorizes;
    # the per-row mean still accumulates in float64
    for r in range(n):
        acc = 0.0
        for j in range(d):
            acc += float(x[r, j]) * float(x[r, j])
        inv_rms[r] = 1.0 / np.sqrt(acc / d + eps)
        ir = inv_rms[r]
        for j in range(d):
            out[r, j] = x[r, j] * ir * gamma[j]
    return out, inv_rms


@njit(cache=True)
def rmsnorm_bwd(x, gamma, inv_rms, grad):
    n, d = x.shape
    dx = np.empty_like(x)
    dgamma = np.zeros(d, dtype=x.dtype)
    scratch = np.empty(1, dtype=x.dtype)
    for r in range(n):
        ir = inv_rms[r]
        s = 0.0
        for j in range(d):
            s += float(grad[r, j]) * float(gamma[j]) * float(x[r, j])
        scratch[0] = s * ir * ir * ir / d
        coef = scratch[0]
        for j in range(d):
            dx[r, j] = grad[r, j] * gamma[j] * ir - x[r, j] * coef
            dgamma[j] += grad[r, j] * x[r, j] * ir
    return dx, dgamma


@njit(cache=True)
def swiglu_fwd(gate, up):
    out = np.empty_like(gate)
    flat_g = gate.ravel()
    flat_u = up.ravel()
    flat_o = out.ravel()
    for i in range(flat_g.size):
        sig = 1.0 / (1.0 + np.exp(-flat_g[i]))
        flat_o[i] = flat_g[i] * sig * flat_u[i]
    return out


@njit(cache=True)
def swiglu_bwd(gate, up, grad):
    dgate = np.empty_like(gate)
    dup = np.empty_like(up)
    fg = gate.ravel()
    fu = up.ravel()
    fr = grad.ravel()
    fdg = dgate.ravel()
    fdu = dup.ravel()
    for i in range(fg.size):
        sig = 1.0 / (1.0 + np.exp(-fg[i]))
        silu = fg[i] * sig
        dsilu = sig * (1.0 + fg[i] * (1.0 - sig))
        fdg[i] = fr[i] * fu[i] * dsilu
        fdu[i] = fr[i] * silu
    return dgate, dup


@njit(cache=True)
def softmax_fwd(x):
    n, k = x.shape
    out = np.empty_like(x)
    for r in range(n):
        mx = x[r, 0]
        for j in range(1, k):
            if x[r, j] > mx:
                mx = x[r, j]
        z = 0.0
        for j in range(k):
            e = np.exp(x[r, j] - mx)
            out[r, j] = e
            z += e
        for j in range(k):
            out[r, j] /= z
    return out


@njit(cache=True)
def softmax_bwd(probs, grad):
    n, k = probs.shape
    dx = np.empty_like(probs)
    for r in range(n):
        dot = 0.0
        for j in range(k):
            dot += probs[r, j] * grad[r, j]
        for j in range(k):
            dx[r, j] = probs[r, j] * (grad[r, j] - dot)
    return dx


@njit(cache=True)
def cross_entropy_fwd(logits, targets):
    n, v = logits.shape
    probs = np.empty_like(logits)
    losses = np.empty(n, dtype=logits.dtype)
    for r in range(n):
        mx = logits[r, 0]
        for j in range(1, v):
            if logits[r, j] > mx:
                mx = logits[r, j]
        z = 0.0
        for j in range(v):
            e = np.exp(logits[r, j] - mx)
            probs[r, j] = e
            z += e
        for j in range(v):
            probs[r, j] /= z
        losses[r] = np.log(z) - (logits[r, targets[r]] - mx)
    return losses, probs


@njit(cache=True)
def cross_entropy_bwd(probs, targets, scale):
    n, v = probs.shape
    dlogits = np.empty_like(probs)
    for r in range(n):
        for j in range(v):
            dlogits[r, j] = probs[r, j] * scale
        dlogits[r, targets[r]] -= scale
    return dlogits


@njit(cache=True)
def rope_rotate(x, cos, sin):
    n, hd = x.shape
    half = hd // 2
    out = np.empty_like(x)
    for r in range(n):
        for i in range(half):
            c = cos[r, i]
            s = sin[r, i]
            x0 = x[r, 2 * i]
            x1 = x[r, 2 * i + 1]
            out[r, 2 * i] = x0 * c - x1 * s
            out[r, 2 * i + 1] = x0 * s + x1 * c
    return out


@njit(cache=True)
def adamw_update(p, g, m, v, lr, beta1, beta2, eps, wd, bc1, bc2):
    # scalars arrive pre-cast to the array dtype; `one` keeps the loop free
    # of float64 literals so the f32 path vectorizes
    one = bc1 / bc1
    for i in range(p.size):
        m[i] = beta1 * m[i] + (one - beta1) * g[i]
        v[i] = beta2 * v[i] + (one - beta2) * (g[i] * g[i])
        mhat = m[i] / bc1
        vhat = v[i] / bc2
        p[i] -= lr * (mhat / (np.sqrt(vhat) + eps)) + (lr * wd) * p[i]


@njit(cache=True)
def sq_sum(x):
    acc = 0.0
    for i in range(x.size):
        acc += float(x[i]) * float(x[i])
    return acc


@njit(cache=True)
def merge_pair(ids, a, b, new_id):
    n = len(ids)
    if n < 2:
        return ids.copy()
    out = np.empty(n, dtype=ids.dtype)
    w = 0
    r = 0
    while r < n:
        if r + 1 < n and ids[r] == a and ids[r + 1] == b:
            out[w] = new_id
            r += 2
        else:
            out[w] = ids[r]
            r += 1
        w += 1
    return out[:w].copy()


@njit(cache=True)
def encode_merges(ids, lefts, rights, news):
    for k in range(len(news)):
        if len(ids) < 2:
            break
        # Skip the rewrite when the rule cannot fire.
        hit = False
        for r in range(len(ids) - 1):
            if ids[r] == lefts[k] and ids[r + 1] == rights[k]:
                hit = True
                break
        if hit:
            ids = merge_pair(ids, lefts[k], rights[k], news[k])
    return ids
