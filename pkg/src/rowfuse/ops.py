"""Fused forward/backward kernels for the transformer training path.

Every op here runs in the dtype of its inputs, caches only the small
per-row statistics its backward needs (never the normalized activations),
and computes gradients from closed-form expressions. Cross entropy turns
its logits buffer into the gradient in place; the chunked projection head
in `flce` builds on that contract.

Rows never interact except in the final gamma/beta reductions, which
combine per-row partials with a fixed-order pairwise tree. That makes the
optional row-parallel mode (workers > 1) bitwise identical to the serial
path.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import (
    DType,
    Matrix2D,
    OddHeadDim,
    ShapeMismatch,
    TargetOutOfRange,
    Vector,
    assert_contiguous,
)
from .memtrack import AllocationLedger, tracked

_CE_SEGMENT = 8192  # row-segment width for the streaming softmax statistics

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715
_GELU_3A = 0.134145  # 3 * 0.044715, appears in the tanh-form derivative


class Reduction(enum.Enum):
    MEAN = "mean"
    SUM = "sum"


@dataclass
class NormResiduals:
    """What a norm forward saves for its backward.

    Only the per-row scale (and the mean, for layernorm) is kept; the
    normalized rows are recomputed from `x` on demand. That is the whole
    memory story of the fused norms.
    """

    x: Matrix2D
    inv_rms: np.ndarray
    mean: np.ndarray | None = None


@dataclass(frozen=True)
class RotationSpec:
    """Per-row rotary geometry: head width, frequencies, and positions."""

    head_dim: int
    thetas: np.ndarray  # head_dim/2 angular frequencies, all positive
    positions: np.ndarray  # one position per matrix row

    def __post_init__(self) -> None:
        if self.head_dim < 2 or self.head_dim % 2 != 0:
            raise OddHeadDim(f"head_dim must be even and >= 2, got {self.head_dim}")
        object.__setattr__(self, "thetas", np.asarray(self.thetas, dtype=np.float64))
        object.__setattr__(self, "positions", np.asarray(self.positions, dtype=np.float64))
        if self.thetas.ndim != 1 or self.thetas.shape[0] != self.head_dim // 2:
            raise ShapeMismatch(
                f"need {self.head_dim // 2} frequencies for head_dim {self.head_dim}, "
                f"got {self.thetas.shape}"
            )
        if not np.all(self.thetas > 0):
            raise ValueError("all rotary frequencies must be positive")
        if self.positions.ndim != 1:
            raise ShapeMismatch("positions must be one value per row")


def rotation_thetas(head_dim: int, base: float = 10000.0) -> np.ndarray:
    """Conventional geometric frequency schedule: base**(-2i/head_dim)."""
    if head_dim < 2 or head_dim % 2 != 0:
        raise OddHeadDim(f"head_dim must be even and >= 2, got {head_dim}")
    return base ** (-2.0 * np.arange(head_dim // 2, dtype=np.float64) / head_dim)


@dataclass(frozen=True)
class GluInputs:
    """Gate/value halves of a GLU layer. Projections happen at the caller."""

    x1: Matrix2D  # gate input
    x2: Matrix2D  # linear input

    def __post_init__(self) -> None:
        if (self.x1.rows, self.x1.cols) != (self.x2.rows, self.x2.cols):
            raise ShapeMismatch(
                f"gate {self.x1.rows}x{self.x1.cols} and linear "
                f"{self.x2.rows}x{self.x2.cols} halves must match"
            )
        if self.x1.dtype is not self.x2.dtype:
            raise ShapeMismatch("gate and linear halves must share a dtype")


@dataclass(frozen=True)
class CEResult:
    loss: float
    grad_in_logits: bool = True  # the logits buffer now holds d(loss)/d(logits)


# ---------------------------------------------------------------------------
# shared plumbing


def _row_spans(rows: int, workers: int) -> list[tuple[int, int]]:
    blocks = max(1, min(workers, rows))
    step = -(-rows // blocks)
    return [(lo, min(lo + step, rows)) for lo in range(0, rows, step)]


def _run_spans(spans: list[tuple[int, int]], body) -> None:
    if len(spans) == 1:
        body(*spans[0])
        return
    with ThreadPoolExecutor(max_workers=len(spans)) as pool:
        for fut in [pool.submit(body, lo, hi) for lo, hi in spans]:
            fut.result()


def _run_rows(rows: int, workers: int, body) -> None:
    _run_spans(_row_spans(rows, workers if workers and workers > 1 else 1), body)


def _tree_sum(parts: np.ndarray) -> np.ndarray:
    """Fixed-order pairwise reduction over axis 0.

    The combine order depends only on the row count, never on how the
    partials were produced, so serial and row-parallel runs agree bitwise
    and a row-adjacent duplicated batch doubles the result exactly.
    """
    a = parts
    while a.shape[0] > 1:
        n = a.shape[0]
        if n % 2:
            a = np.concatenate([a[0 : n - 1 : 2] + a[1:n:2], a[n - 1 : n]])
        else:
            a = a[0::2] + a[1::2]
    return a[0].copy()


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # exp(-|z|) never overflows; pick the matching quotient per sign:
    # 1/(1+e) for z >= 0, e/(1+e) for z < 0
    e = np.exp(-np.abs(z))
    num = np.where(z >= 0, 1.0, e)
    e += 1.0
    np.divide(num, e, out=num)
    return num


def _check_param(v: Vector, cols: int, dtype: DType, name: str) -> np.ndarray:
    if v.length != cols:
        raise ShapeMismatch(f"{name} has length {v.length}, rows are {cols} wide")
    if v.dtype is not dtype:
        raise ShapeMismatch(f"{name} dtype {v.dtype.value} != input dtype {dtype.value}")
    return v.data


def _check_like(a: Matrix2D, b: Matrix2D, what: str) -> None:
    if (a.rows, a.cols) != (b.rows, b.cols):
        raise ShapeMismatch(
            f"{what}: {a.rows}x{a.cols} vs {b.rows}x{b.cols} must match"
        )
    if a.dtype is not b.dtype:
        raise ShapeMismatch(f"{what}: dtypes {a.dtype.value} vs {b.dtype.value} must match")


def _wrap(arr2d: np.ndarray, dtype: DType) -> Matrix2D:
    return Matrix2D(arr2d.shape[0], arr2d.shape[1], arr2d.reshape(-1), dtype)


# ---------------------------------------------------------------------------
# RMSNorm


def rmsnorm_forward(
    x: Matrix2D, gamma: Vector, eps: float = 1e-6, workers: int = 0
) -> tuple[Matrix2D, NormResiduals]:
    """y = (x / rms(x)) * gamma with rms(x) = sqrt(mean(x^2) + eps), per row.

    Caches one scale per row; the backward rebuilds the normalized rows
    from the input instead of storing them.
    """
    assert_contiguous(x)
    g = _check_param(gamma, x.cols, x.dtype, "gamma")
    X = x.view2d
    n = x.cols
    out = np.empty_like(X)
    inv_rms = np.empty(x.rows, dtype=X.dtype)

    def body(lo: int, hi: int) -> None:
        xb = X[lo:hi]
        ss = np.einsum("ij,ij->i", xb, xb)
        r = 1.0 / np.sqrt(ss / n + eps)
        inv_rms[lo:hi] = r
        np.multiply(xb, r[:, None], out=out[lo:hi])
        out[lo:hi] *= g

    _run_rows(x.rows, workers, body)
    return _wrap(out, x.dtype), NormResiduals(x=x, inv_rms=inv_rms)


def rmsnorm_backward(
    dy: Matrix2D, res: NormResiduals, gamma: Vector, workers: int = 0
) -> tuple[Matrix2D, Vector]:
    """dx = (1/rms) * (dy*g - (xhat . (dy*g) / n) * xhat); dgamma = sum_rows dy*xhat."""
    assert_contiguous(dy)
    assert_contiguous(res.x)
    _check_like(dy, res.x, "grad vs saved input")
    g = _check_param(gamma, dy.cols, dy.dtype, "gamma")
    X = res.x.view2d
    DY = dy.view2d
    r = res.inv_rms
    n = dy.cols
    dx = np.empty_like(X)
    partials = np.empty_like(X)

    def body(lo: int, hi: int) -> None:
        rb = r[lo:hi, None]
        xhat = X[lo:hi] * rb
        gy = DY[lo:hi] * g
        proj = np.einsum("ij,ij->i", xhat, gy) / n
        np.multiply(gy - proj[:, None] * xhat, rb, out=dx[lo:hi])
        np.multiply(DY[lo:hi], xhat, out=partials[lo:hi])

    _run_rows(dy.rows, workers, body)
    return _wrap(dx, dy.dtype), Vector(_tree_sum(partials), dy.dtype)


# ---------------------------------------------------------------------------
# LayerNorm


def layernorm_forward(
    x: Matrix2D, gamma: Vector, beta: Vector, eps: float = 1e-6, workers: int = 0
) -> tuple[Matrix2D, NormResiduals]:
    """y = ((x - mean) / rms(x - mean)) * gamma + beta, per row.

    eps sits inside the root: rms(v) = sqrt(mean(v^2) + eps). Cached
    residuals are the per-row mean and inverse rms only.
    """
    assert_contiguous(x)
    g = _check_param(gamma, x.cols, x.dtype, "gamma")
    b = _check_param(beta, x.cols, x.dtype, "beta")
    X = x.view2d
    n = x.cols
    out = np.empty_like(X)
    inv_rms = np.empty(x.rows, dtype=X.dtype)
    mean = np.empty(x.rows, dtype=X.dtype)

    def body(lo: int, hi: int) -> None:
        xb = X[lo:hi]
        mu = xb.mean(axis=1)
        v = xb - mu[:, None]
        ss = np.einsum("ij,ij->i", v, v)
        r = 1.0 / np.sqrt(ss / n + eps)
        mean[lo:hi] = mu
        inv_rms[lo:hi] = r
        np.multiply(v, r[:, None], out=out[lo:hi])
        out[lo:hi] *= g
        out[lo:hi] += b

    _run_rows(x.rows, workers, body)
    return _wrap(out, x.dtype), NormResiduals(x=x, inv_rms=inv_rms, mean=mean)


def layernorm_backward(
    dy: Matrix2D, res: NormResiduals, gamma: Vector, workers: int = 0
) -> tuple[Matrix2D, Vector, Vector]:
    """Centered analogue of the rmsnorm backward plus the mean-shift term.

    dx = (1/rms) * (dy*g - (xt . (dy*g) / n) * xt - mean(dy*g));
    dgamma = sum_rows dy*xt; dbeta = sum_rows dy.
    """
    assert_contiguous(dy)
    assert_contiguous(res.x)
    _check_like(dy, res.x, "grad vs saved input")
    if res.mean is None:
        raise ShapeMismatch("residuals carry no mean; these came from rmsnorm")
    g = _check_param(gamma, dy.cols, dy.dtype, "gamma")
    X = res.x.view2d
    DY = dy.view2d
    r = res.inv_rms
    mu = res.mean
    n = dy.cols
    dx = np.empty_like(X)
    partials = np.empty_like(X)

    def body(lo: int, hi: int) -> None:
        rb = r[lo:hi, None]
        xt = (X[lo:hi] - mu[lo:hi, None]) * rb
        gy = DY[lo:hi] * g
        proj = np.einsum("ij,ij->i", xt, gy) / n
        shift = gy.sum(axis=1) / n
        np.multiply(gy - proj[:, None] * xt - shift[:, None], rb, out=dx[lo:hi])
        np.multiply(DY[lo:hi], xt, out=partials[lo:hi])

    _run_rows(dy.rows, workers, body)
    dgamma = Vector(_tree_sum(partials), dy.dtype)
    dbeta = Vector(_tree_sum(DY), dy.dtype)
    return _wrap(dx, dy.dtype), dgamma, dbeta


# ---------------------------------------------------------------------------
# Rotary position embedding (half-split layout)


def _rotate_half(X: np.ndarray, cos: np.ndarray, sin: np.ndarray, out: np.ndarray) -> None:
    h = cos.shape[1]
    x1 = X[:, :h]
    x2 = X[:, h:]
    np.multiply(x1, cos, out=out[:, :h])
    out[:, :h] -= x2 * sin
    np.multiply(x1, sin, out=out[:, h:])
    out[:, h:] += x2 * cos


def _rope_guards(q: Matrix2D, k: Matrix2D, spec: RotationSpec) -> None:
    assert_contiguous(q)
    assert_contiguous(k)
    _check_like(q, k, "query vs key block")
    if q.cols != spec.head_dim:
        raise ShapeMismatch(f"row width {q.cols} != spec head_dim {spec.head_dim}")
    if spec.positions.shape[0] != q.rows:
        raise ShapeMismatch(
            f"{spec.positions.shape[0]} positions for {q.rows} rows"
        )


def _rope_apply(
    q: Matrix2D, k: Matrix2D, spec: RotationSpec, sign: float, workers: int
) -> tuple[Matrix2D, Matrix2D]:
    dt = q.dtype.np_dtype
    Q = q.view2d
    K = k.view2d
    pos = spec.positions.astype(dt)
    th = spec.thetas.astype(dt)
    qo = np.empty_like(Q)
    ko = np.empty_like(K)

    def body(lo: int, hi: int) -> None:
        ang = pos[lo:hi, None] * th[None, :]
        cos = np.cos(ang)
        sin = np.sin(ang)
        if sign < 0:
            np.negative(sin, out=sin)
        # one pass serves both projections; cos/sin are evaluated once
        _rotate_half(Q[lo:hi], cos, sin, qo[lo:hi])
        _rotate_half(K[lo:hi], cos, sin, ko[lo:hi])

    _run_rows(q.rows, workers, body)
    return _wrap(qo, q.dtype), _wrap(ko, k.dtype)


def rope_forward(
    q: Matrix2D, k: Matrix2D, spec: RotationSpec, workers: int = 0
) -> tuple[Matrix2D, Matrix2D]:
    """Rotate each row by its position: pairs (x_i, x_{i+d/2}) turn by m*theta_i."""
    _rope_guards(q, k, spec)
    return _rope_apply(q, k, spec, 1.0, workers)


def rope_backward(
    dq_rot: Matrix2D, dk_rot: Matrix2D, spec: RotationSpec, workers: int = 0
) -> tuple[Matrix2D, Matrix2D]:
    """Transpose of the forward rotation: the same turn with the sine negated."""
    _rope_guards(dq_rot, dk_rot, spec)
    return _rope_apply(dq_rot, dk_rot, spec, -1.0, workers)


# ---------------------------------------------------------------------------
# SwiGLU / GeGLU


def swiglu_forward(inputs: GluInputs, workers: int = 0) -> Matrix2D:
    """y = silu(x1) * x2 with silu(z) = z * sigmoid(z)."""
    assert_contiguous(inputs.x1)
    assert_contiguous(inputs.x2)
    X1 = inputs.x1.view2d
    X2 = inputs.x2.view2d
    out = np.empty_like(X1)

    def body(lo: int, hi: int) -> None:
        x1 = X1[lo:hi]
        np.multiply(x1 * _sigmoid(x1), X2[lo:hi], out=out[lo:hi])

    _run_rows(inputs.x1.rows, workers, body)
    return _wrap(out, inputs.x1.dtype)


def swiglu_backward(
    dy: Matrix2D, inputs: GluInputs, workers: int = 0
) -> tuple[Matrix2D, Matrix2D]:
    """Recomputes sigma(x1) from the saved inputs instead of caching activations.

    dx1 = dy * (sigma + silu * (1 - sigma)) * x2; dx2 = dy * silu.
    """
    assert_contiguous(dy)
    assert_contiguous(inputs.x1)
    assert_contiguous(inputs.x2)
    _check_like(dy, inputs.x1, "grad vs gate input")
    X1 = inputs.x1.view2d
    X2 = inputs.x2.view2d
    DY = dy.view2d
    dx1 = np.empty_like(X1)
    dx2 = np.empty_like(X2)

    def body(lo: int, hi: int) -> None:
        x1 = X1[lo:hi]
        sig = _sigmoid(x1)
        silu = x1 * sig
        np.multiply(DY[lo:hi] * (sig + silu * (1.0 - sig)), X2[lo:hi], out=dx1[lo:hi])
        np.multiply(DY[lo:hi], silu, out=dx2[lo:hi])

    _run_rows(dy.rows, workers, body)
    return _wrap(dx1, dy.dtype), _wrap(dx2, dy.dtype)


def _gelu_tanh(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    t = np.tanh(_GELU_C * (z + _GELU_A * z * z * z))
    return 0.5 * z * (1.0 + t), t


def geglu_forward(inputs: GluInputs, workers: int = 0) -> Matrix2D:
    """y = gelu(x1) * x2 with the tanh form of gelu."""
    assert_contiguous(inputs.x1)
    assert_contiguous(inputs.x2)
    X1 = inputs.x1.view2d
    X2 = inputs.x2.view2d
    out = np.empty_like(X1)

    def body(lo: int, hi: int) -> None:
        gelu, _ = _gelu_tanh(X1[lo:hi])
        np.multiply(gelu, X2[lo:hi], out=out[lo:hi])

    _run_rows(inputs.x1.rows, workers, body)
    return _wrap(out, inputs.x1.dtype)


def geglu_backward(
    dy: Matrix2D, inputs: GluInputs, workers: int = 0
) -> tuple[Matrix2D, Matrix2D]:
    """Closed-form tanh-gelu derivative, recomputed from the saved inputs.

    gelu'(z) = 0.5*(1 + t) + 0.5*c*z*(1 - t^2)*(1 + 0.134145*z^2)
    with t = tanh(c*(z + 0.044715*z^3)) and c = sqrt(2/pi).
    """
    assert_contiguous(dy)
    assert_contiguous(inputs.x1)
    assert_contiguous(inputs.x2)
    _check_like(dy, inputs.x1, "grad vs gate input")
    X1 = inputs.x1.view2d
    X2 = inputs.x2.view2d
    DY = dy.view2d
    dx1 = np.empty_like(X1)
    dx2 = np.empty_like(X2)

    def body(lo: int, hi: int) -> None:
        z = X1[lo:hi]
        gelu, t = _gelu_tanh(z)
        dgelu = 0.5 * (1.0 + t) + (0.5 * _GELU_C) * z * (1.0 - t * t) * (
            1.0 + _GELU_3A * z * z
        )
        np.multiply(DY[lo:hi] * dgelu, X2[lo:hi], out=dx1[lo:hi])
        np.multiply(DY[lo:hi], gelu, out=dx2[lo:hi])

    _run_rows(dy.rows, workers, body)
    return _wrap(dx1, dy.dtype), _wrap(dx2, dy.dtype)


# ---------------------------------------------------------------------------
# Cross entropy (gradient written into the logits buffer)


def _check_targets(targets, rows: int, vocab: int) -> np.ndarray:
    t = np.asarray(targets)
    if t.ndim != 1 or t.shape[0] != rows:
        raise ShapeMismatch(f"need one target per row ({rows}), got shape {t.shape}")
    if not np.issubdtype(t.dtype, np.integer):
        raise ShapeMismatch(f"targets must be integer class ids, got dtype {t.dtype}")
    t = t.astype(np.int64)
    if t.size and (int(t.min()) < 0 or int(t.max()) >= vocab):
        bad = int(t.min()) if int(t.min()) < 0 else int(t.max())
        raise TargetOutOfRange(f"target {bad} outside [0, {vocab})")
    return t


def cross_entropy(
    logits: Matrix2D,
    targets,
    reduction: Reduction = Reduction.MEAN,
    ledger: AllocationLedger | None = None,
    workers: int = 0,
) -> CEResult:
    """Softmax cross entropy that leaves d(loss)/d(logits) in the logits buffer.

    Per row: a streaming pass over fixed-width segments maintains the
    running max and rescaled exp-sum (so no second rows x vocab buffer is
    ever allocated), then the row itself is rewritten in place from
    logits to probabilities to gradient y - onehot(target). The loss uses
    a safe log: probabilities are clamped at the smallest positive normal
    of the compute dtype. Mean reduction divides the loss and the whole
    gradient by the row count at the end, so it is exactly sum / rows.
    """
    assert_contiguous(logits)
    X = logits.view2d
    rows, vocab = logits.rows, logits.cols
    t = _check_targets(targets, rows, vocab)
    dt = logits.dtype.np_dtype
    tiny = float(np.finfo(dt).tiny)
    seg = min(vocab, _CE_SEGMENT)
    spans = _row_spans(rows, workers if workers and workers > 1 else 1)
    losses = np.empty(rows, dtype=np.float64)

    def body(lo: int, hi: int) -> None:
        buf = np.empty(seg, dtype=dt)
        for i in range(lo, hi):
            row = X[i]
            m = -math.inf
            s = 0.0
            for a in range(0, vocab, seg):
                b = min(a + seg, vocab)
                w = b - a
                block_max = float(row[a:b].max())
                if block_max > m:
                    if s > 0.0:
                        s *= math.exp(m - block_max)
                    m = block_max
                np.subtract(row[a:b], m, out=buf[:w])
                np.exp(buf[:w], out=buf[:w])
                s += float(buf[:w].sum())
            # in place: logits -> shifted -> probabilities -> gradient
            np.subtract(row, m, out=row)
            np.exp(row, out=row)
            np.divide(row, s, out=row)
            losses[i] = -math.log(max(float(row[t[i]]), tiny))
            row[t[i]] -= 1.0

    with tracked(ledger, "ce_scratch", len(spans) * seg * logits.dtype.byte_width):
        _run_spans(spans, body)

    total = math.fsum(losses)
    if reduction is Reduction.MEAN:
        total /= rows
        np.divide(X, rows, out=X)
    return CEResult(loss=float(total))
