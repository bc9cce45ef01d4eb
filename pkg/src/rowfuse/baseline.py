"""Unfused comparison variants of every kernel, on plain numpy arrays.

These are the eager, materialize-everything implementations a framework
would run without kernel fusion: norms cache their normalized rows for
the backward, GLUs cache their activations, cross entropy builds separate
probability and gradient buffers, and the linear head materializes the
full logits matrix. They run at the working dtype (unlike the float64
scalar oracle), which is what benchmark and convergence comparisons need.

Ledger use records the buffers each variant materializes; every op frees
what it recorded by the end of its forward/backward pair, so peaks are
comparable across repeated runs.
"""

from __future__ import annotations

import math

import numpy as np

from .memtrack import AllocationLedger
from .ops import Reduction, _GELU_3A, _GELU_A, _GELU_C, _sigmoid


def _alloc(ledger: AllocationLedger | None, tag: str, nbytes: int) -> None:
    if ledger is not None:
        ledger.alloc(tag, nbytes)


def _free(ledger: AllocationLedger | None, tag: str, nbytes: int) -> None:
    if ledger is not None:
        ledger.free(tag, nbytes)


# ---------------------------------------------------------------------------
# norms: forward keeps the normalized activations alive for the backward


def rmsnorm_forward(x, gamma, eps: float = 1e-6, ledger=None):
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=1) + eps)
    xhat = x * inv[:, None]
    _alloc(ledger, "norm_cache", xhat.nbytes)
    return xhat * gamma, (xhat, inv)


def rmsnorm_backward(dy, saved, gamma, ledger=None):
    xhat, inv = saved
    n = xhat.shape[1]
    gy = dy * gamma
    proj = np.sum(xhat * gy, axis=1, keepdims=True) / n
    dx = (gy - proj * xhat) * inv[:, None]
    dgamma = np.sum(dy * xhat, axis=0)
    _free(ledger, "norm_cache", xhat.nbytes)
    return dx, dgamma


def layernorm_forward(x, gamma, beta, eps: float = 1e-6, ledger=None):
    mu = x.mean(axis=1)
    v = x - mu[:, None]
    inv = 1.0 / np.sqrt(np.mean(v * v, axis=1) + eps)
    xt = v * inv[:, None]
    _alloc(ledger, "norm_cache", xt.nbytes)
    return xt * gamma + beta, (xt, inv)


def layernorm_backward(dy, saved, gamma, ledger=None):
    xt, inv = saved
    n = xt.shape[1]
    gy = dy * gamma
    proj = np.sum(xt * gy, axis=1, keepdims=True) / n
    shift = np.sum(gy, axis=1, keepdims=True) / n
    dx = (gy - proj * xt - shift) * inv[:, None]
    dgamma = np.sum(dy * xt, axis=0)
    dbeta = np.sum(dy, axis=0)
    _free(ledger, "norm_cache", xt.nbytes)
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# rotary: trig tables built per call and kept for the backward


def _rot_pair(x, cos, sin):
    h = cos.shape[1]
    x1, x2 = x[:, :h], x[:, h:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=1)


def _trig(rows_dtype, thetas, positions):
    ang = positions[:, None].astype(rows_dtype) * thetas[None, :].astype(rows_dtype)
    return np.cos(ang), np.sin(ang)


def rope_forward(q, k, thetas, positions, ledger=None):
    cos, sin = _trig(q.dtype, thetas, positions)
    _alloc(ledger, "rope_trig", cos.nbytes + sin.nbytes)
    return _rot_pair(q, cos, sin), _rot_pair(k, cos, sin), (cos, sin)


def rope_backward(dq_rot, dk_rot, saved, ledger=None):
    cos, sin = saved
    dq = _rot_pair(dq_rot, cos, -sin)
    dk = _rot_pair(dk_rot, cos, -sin)
    _free(ledger, "rope_trig", cos.nbytes + sin.nbytes)
    return dq, dk


# ---------------------------------------------------------------------------
# GLUs: activations cached instead of recomputed


def swiglu_forward(x1, x2, ledger=None):
    sig = _sigmoid(x1)
    silu = x1 * sig
    _alloc(ledger, "glu_cache", sig.nbytes + silu.nbytes)
    return silu * x2, (sig, silu)


def swiglu_backward(dy, x2, saved, ledger=None):
    sig, silu = saved
    dx1 = dy * (sig + silu * (1.0 - sig)) * x2
    dx2 = dy * silu
    _free(ledger, "glu_cache", sig.nbytes + silu.nbytes)
    return dx1, dx2


def geglu_forward(x1, x2, ledger=None):
    t = np.tanh(_GELU_C * (x1 + _GELU_A * x1 * x1 * x1))
    gelu = 0.5 * x1 * (1.0 + t)
    _alloc(ledger, "glu_cache", t.nbytes + gelu.nbytes)
    return gelu * x2, (t, gelu)


def geglu_backward(dy, x1, x2, saved, ledger=None):
    t, gelu = saved
    dgelu = 0.5 * (1.0 + t) + (0.5 * _GELU_C) * x1 * (1.0 - t * t) * (
        1.0 + _GELU_3A * x1 * x1
    )
    dx1 = dy * dgelu * x2
    dx2 = dy * gelu
    _free(ledger, "glu_cache", t.nbytes + gelu.nbytes)
    return dx1, dx2


# ---------------------------------------------------------------------------
# cross entropy: separate probability and gradient buffers


def cross_entropy(logits, targets, reduction: Reduction = Reduction.MEAN, ledger=None):
    """Returns (loss, grad) with grad in a fresh buffer; logits are untouched.

    Peak cost is the point: probabilities and gradient coexist with the
    input, three rows x vocab buffers against the fused path's one.
    """
    rows = logits.shape[0]
    idx = np.arange(rows)
    t = np.asarray(targets, dtype=np.int64)
    _alloc(ledger, "probs", logits.nbytes)
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    tiny = float(np.finfo(logits.dtype).tiny)
    losses = [-math.log(max(float(v), tiny)) for v in p[idx, t]]
    _alloc(ledger, "grad_logits", logits.nbytes)
    grad = p.copy()
    grad[idx, t] -= 1.0
    _free(ledger, "probs", p.nbytes)
    loss = math.fsum(losses)
    if reduction is Reduction.MEAN:
        loss /= rows
        grad /= rows
    # ownership of grad transfers to the caller; the peak is already on record
    _free(ledger, "grad_logits", grad.nbytes)
    return loss, grad


def linear_ce(hidden, weight, targets, reduction: Reduction = Reduction.MEAN, ledger=None):
    """Materialized head: full logits, unfused cross entropy, dense backward."""
    bt = hidden.shape[0]
    nbytes = bt * weight.shape[1] * hidden.dtype.itemsize
    _alloc(ledger, "logits_full", nbytes)
    logits = hidden @ weight
    loss, grad = cross_entropy(logits, targets, reduction, ledger)
    dhidden = grad @ weight.T
    dweight = hidden.T @ grad
    _free(ledger, "logits_full", nbytes)
    return loss, dhidden, dweight
