"""Unfused scalar-loop reference implementations and comparison tools.

Everything here runs at float64 with plain Python loops and sequential
accumulation: no numpy reductions, no caching, no in-place tricks. That
makes this module a genuinely independent route to the same math as the
fused kernels, slow on purpose and used only at small shapes.

`fd_gradient` closes the loop: central finite differences over any scalar
function, used to validate both the fused backwards and the analytic
reference backwards in this module.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .core import Matrix2D, ShapeMismatch, TargetOutOfRange, Vector
from .memtrack import AllocationLedger, tracked
from .ops import _GELU_3A, _GELU_A, _GELU_C, Reduction

_TINY64 = float(np.finfo(np.float64).tiny)


class NonFiniteProbe(ArithmeticError):
    """A finite-difference probe produced NaN or infinity."""


@dataclass(frozen=True)
class Tolerance:
    """Elementwise bound |a - b| <= atol + rtol*|b|, b being the reference."""

    atol: float
    rtol: float

    @classmethod
    def strict(cls) -> "Tolerance":
        """Same-precision check: fused f64 against the f64 reference."""
        return cls(atol=1e-7, rtol=1e-5)

    @classmethod
    def relaxed(cls) -> "Tolerance":
        """Cross-precision check: fused f32 against the f64 reference."""
        return cls(atol=1e-3, rtol=1e-2)

    @classmethod
    def gradcheck(cls) -> "Tolerance":
        """Analytic gradients against central differences, at f64."""
        return cls(atol=1e-6, rtol=1e-4)


class OpKind(enum.Enum):
    RMSNORM = "rmsnorm"
    LAYERNORM = "layernorm"
    ROPE = "rope"
    SWIGLU = "swiglu"
    GEGLU = "geglu"
    CROSS_ENTROPY = "cross_entropy"
    LINEAR_CROSS_ENTROPY = "linear_cross_entropy"


def _rows(x) -> list[list[float]]:
    if isinstance(x, Matrix2D):
        x = x.view2d
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeMismatch(f"expected a 2D operand, got ndim={arr.ndim}")
    return arr.tolist()


def _vec(v) -> list[float]:
    if isinstance(v, Vector):
        v = v.data
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeMismatch(f"expected a 1D operand, got ndim={arr.ndim}")
    return arr.tolist()


def _sigmoid_s(z: float) -> float:
    if z >= 0.0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def _gelu_s(z: float) -> float:
    t = math.tanh(_GELU_C * (z + _GELU_A * z * z * z))
    return 0.5 * z * (1.0 + t)


def _dgelu_s(z: float) -> float:
    t = math.tanh(_GELU_C * (z + _GELU_A * z * z * z))
    return 0.5 * (1.0 + t) + 0.5 * _GELU_C * z * (1.0 - t * t) * (1.0 + _GELU_3A * z * z)


# ---------------------------------------------------------------------------
# forwards


def ref_rmsnorm(x, gamma, eps: float = 1e-6) -> np.ndarray:
    X = _rows(x)
    g = _vec(gamma)
    n = len(g)
    out = []
    for row in X:
        if len(row) != n:
            raise ShapeMismatch(f"row width {len(row)} != gamma length {n}")
        ss = 0.0
        for v in row:
            ss += v * v
        rms = math.sqrt(ss / n + eps)
        out.append([(v / rms) * gi for v, gi in zip(row, g)])
    return np.array(out, dtype=np.float64)


def ref_layernorm(x, gamma, beta, eps: float = 1e-6) -> np.ndarray:
    X = _rows(x)
    g = _vec(gamma)
    b = _vec(beta)
    n = len(g)
    out = []
    for row in X:
        mu = 0.0
        for v in row:
            mu += v
        mu /= n
        ss = 0.0
        for v in row:
            ss += (v - mu) * (v - mu)
        rms = math.sqrt(ss / n + eps)
        out.append([((v - mu) / rms) * gi + bi for v, gi, bi in zip(row, g, b)])
    return np.array(out, dtype=np.float64)


def _rot_rows(rows, thetas, positions, sign):
    h = len(thetas)
    out = []
    for m, row in zip(positions, rows):
        if len(row) != 2 * h:
            raise ShapeMismatch(f"row width {len(row)} != 2 * {h} frequencies")
        res = [0.0] * len(row)
        for i in range(h):
            c = math.cos(m * thetas[i])
            s = sign * math.sin(m * thetas[i])
            res[i] = row[i] * c - row[i + h] * s
            res[i + h] = row[i] * s + row[i + h] * c
        out.append(res)
    return np.array(out, dtype=np.float64)


def ref_rope(q, k, thetas, positions) -> tuple[np.ndarray, np.ndarray]:
    th = _vec(thetas)
    pos = _vec(positions)
    Q, K = _rows(q), _rows(k)
    if len(pos) != len(Q) or len(Q) != len(K):
        raise ShapeMismatch("need one position per row of both projections")
    return _rot_rows(Q, th, pos, 1.0), _rot_rows(K, th, pos, 1.0)


def ref_swiglu(x1, x2) -> np.ndarray:
    X1, X2 = _rows(x1), _rows(x2)
    return np.array(
        [[a * _sigmoid_s(a) * b for a, b in zip(r1, r2)] for r1, r2 in zip(X1, X2)],
        dtype=np.float64,
    )


def ref_geglu(x1, x2) -> np.ndarray:
    X1, X2 = _rows(x1), _rows(x2)
    return np.array(
        [[_gelu_s(a) * b for a, b in zip(r1, r2)] for r1, r2 in zip(X1, X2)],
        dtype=np.float64,
    )


def _check_targets_ref(targets, rows: int, vocab: int) -> list[int]:
    t = [int(v) for v in np.asarray(targets).tolist()]
    if len(t) != rows:
        raise ShapeMismatch(f"need one target per row ({rows}), got {len(t)}")
    for v in t:
        if v < 0 or v >= vocab:
            raise TargetOutOfRange(f"target {v} outside [0, {vocab})")
    return t


def ref_cross_entropy(
    logits, targets, reduction: Reduction = Reduction.MEAN
) -> tuple[float, np.ndarray]:
    """Textbook composition: full softmax, loss, then a separate gradient."""
    X = _rows(logits)
    vocab = len(X[0])
    t = _check_targets_ref(targets, len(X), vocab)
    losses = []
    grads = []
    for row, ti in zip(X, t):
        m = row[0]
        for v in row:
            if v > m:
                m = v
        exps = [math.exp(v - m) for v in row]
        s = 0.0
        for e in exps:
            s += e
        probs = [e / s for e in exps]
        losses.append(-math.log(max(probs[ti], _TINY64)))
        grow = list(probs)
        grow[ti] -= 1.0
        grads.append(grow)
    loss = 0.0
    for v in losses:
        loss += v
    grad = np.array(grads, dtype=np.float64)
    if reduction is Reduction.MEAN:
        loss /= len(X)
        grad /= len(X)
    return loss, grad


def ref_linear_cross_entropy(
    hidden,
    weight,
    targets,
    reduction: Reduction = Reduction.MEAN,
    ledger: AllocationLedger | None = None,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Projection then cross entropy with the logits fully materialized.

    This is the memory-hungry path the chunked head exists to avoid; the
    optional ledger records the full rows x vocab logits buffer.
    """
    Hm = _rows(hidden)
    W = _rows(weight)
    bt, hd = len(Hm), len(Hm[0])
    if len(W) != hd:
        raise ShapeMismatch(f"weight has {len(W)} rows, hidden width is {hd}")
    vocab = len(W[0])
    with tracked(ledger, "logits_full", bt * vocab * 8):
        logits = []
        for hrow in Hm:
            lrow = []
            for v in range(vocab):
                acc = 0.0
                for a in range(hd):
                    acc += hrow[a] * W[a][v]
                lrow.append(acc)
            logits.append(lrow)
        loss, grad = ref_cross_entropy(logits, targets, reduction)
        G = grad.tolist()
        dhidden = [
            [sum_seq(G[i][v] * W[a][v] for v in range(vocab)) for a in range(hd)]
            for i in range(bt)
        ]
        dweight = [
            [sum_seq(Hm[i][a] * G[i][v] for i in range(bt)) for v in range(vocab)]
            for a in range(hd)
        ]
    return loss, np.array(dhidden, dtype=np.float64), np.array(dweight, dtype=np.float64)


def sum_seq(values) -> float:
    """Strictly sequential accumulation, the oracle's only reduction order."""
    acc = 0.0
    for v in values:
        acc += v
    return acc


def ref_forward(kind: OpKind, **operands):
    """Dispatch to the reference forward for one operator kind."""
    if kind is OpKind.RMSNORM:
        return ref_rmsnorm(
            operands["x"], operands["gamma"], operands.get("eps", 1e-6)
        )
    if kind is OpKind.LAYERNORM:
        return ref_layernorm(
            operands["x"], operands["gamma"], operands["beta"], operands.get("eps", 1e-6)
        )
    if kind is OpKind.ROPE:
        spec = operands.get("spec")
        thetas = spec.thetas if spec is not None else operands["thetas"]
        positions = spec.positions if spec is not None else operands["positions"]
        return ref_rope(operands["q"], operands["k"], thetas, positions)
    if kind is OpKind.SWIGLU:
        return ref_swiglu(operands["x1"], operands["x2"])
    if kind is OpKind.GEGLU:
        return ref_geglu(operands["x1"], operands["x2"])
    if kind is OpKind.CROSS_ENTROPY:
        return ref_cross_entropy(
            operands["logits"], operands["targets"], operands.get("reduction", Reduction.MEAN)
        )
    if kind is OpKind.LINEAR_CROSS_ENTROPY:
        return ref_linear_cross_entropy(
            operands["hidden"],
            operands["weight"],
            operands["targets"],
            operands.get("reduction", Reduction.MEAN),
            operands.get("ledger"),
        )
    raise ValueError(f"unknown op kind {kind!r}")


# ---------------------------------------------------------------------------
# analytic backwards (same math as the fused path, scalar route)


def ref_rmsnorm_backward(dy, x, gamma, eps: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    DY, X, g = _rows(dy), _rows(x), _vec(gamma)
    n = len(g)
    dx = []
    dgamma = [0.0] * n
    for row, dyr in zip(X, DY):
        ss = 0.0
        for v in row:
            ss += v * v
        rms = math.sqrt(ss / n + eps)
        xhat = [v / rms for v in row]
        gy = [d * gi for d, gi in zip(dyr, g)]
        dot = 0.0
        for xv, gv in zip(xhat, gy):
            dot += xv * gv
        coef = dot / n
        dx.append([(gv - coef * xv) / rms for gv, xv in zip(gy, xhat)])
        for j in range(n):
            dgamma[j] += dyr[j] * xhat[j]
    return np.array(dx, dtype=np.float64), np.array(dgamma, dtype=np.float64)


def ref_layernorm_backward(
    dy, x, gamma, eps: float = 1e-6
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    DY, X, g = _rows(dy), _rows(x), _vec(gamma)
    n = len(g)
    dx = []
    dgamma = [0.0] * n
    dbeta = [0.0] * n
    for row, dyr in zip(X, DY):
        mu = 0.0
        for v in row:
            mu += v
        mu /= n
        ss = 0.0
        for v in row:
            ss += (v - mu) * (v - mu)
        rms = math.sqrt(ss / n + eps)
        xt = [(v - mu) / rms for v in row]
        gy = [d * gi for d, gi in zip(dyr, g)]
        dot = 0.0
        gsum = 0.0
        for xv, gv in zip(xt, gy):
            dot += xv * gv
            gsum += gv
        dx.append([(gv - (dot / n) * xv - gsum / n) / rms for gv, xv in zip(gy, xt)])
        for j in range(n):
            dgamma[j] += dyr[j] * xt[j]
            dbeta[j] += dyr[j]
    return (
        np.array(dx, dtype=np.float64),
        np.array(dgamma, dtype=np.float64),
        np.array(dbeta, dtype=np.float64),
    )


def ref_rope_backward(dq_rot, dk_rot, thetas, positions) -> tuple[np.ndarray, np.ndarray]:
    th = _vec(thetas)
    pos = _vec(positions)
    DQ, DK = _rows(dq_rot), _rows(dk_rot)
    if len(pos) != len(DQ) or len(DQ) != len(DK):
        raise ShapeMismatch("need one position per row of both gradients")
    return _rot_rows(DQ, th, pos, -1.0), _rot_rows(DK, th, pos, -1.0)


def ref_swiglu_backward(dy, x1, x2) -> tuple[np.ndarray, np.ndarray]:
    DY, X1, X2 = _rows(dy), _rows(x1), _rows(x2)
    dx1 = []
    dx2 = []
    for dyr, r1, r2 in zip(DY, X1, X2):
        row1 = []
        row2 = []
        for d, a, b in zip(dyr, r1, r2):
            sig = _sigmoid_s(a)
            silu = a * sig
            row1.append(d * (sig + silu * (1.0 - sig)) * b)
            row2.append(d * silu)
        dx1.append(row1)
        dx2.append(row2)
    return np.array(dx1, dtype=np.float64), np.array(dx2, dtype=np.float64)


def ref_geglu_backward(dy, x1, x2) -> tuple[np.ndarray, np.ndarray]:
    DY, X1, X2 = _rows(dy), _rows(x1), _rows(x2)
    dx1 = []
    dx2 = []
    for dyr, r1, r2 in zip(DY, X1, X2):
        dx1.append([d * _dgelu_s(a) * b for d, a, b in zip(dyr, r1, r2)])
        dx2.append([d * _gelu_s(a) for d, a in zip(dyr, r1)])
    return np.array(dx1, dtype=np.float64), np.array(dx2, dtype=np.float64)


# ---------------------------------------------------------------------------
# finite differences and comparison


def fd_gradient(f, at, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector.

    Probes f at x +- h per coordinate; any non-finite probe value raises
    NonFiniteProbe instead of polluting the estimate.
    """
    if h <= 0.0:
        raise ValueError(f"step must be positive, got {h}")
    if isinstance(at, Vector):
        at = at.data
    x = np.array(at, dtype=np.float64).reshape(-1)
    grad = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + h
        fp = float(f(x.copy()))
        x[i] = orig - h
        fm = float(f(x.copy()))
        x[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteProbe(f"probe {i} hit fp={fp!r}, fm={fm!r}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def _unwrap(v) -> np.ndarray:
    if isinstance(v, Matrix2D):
        return v.view2d
    if isinstance(v, Vector):
        return v.data
    return np.asarray(v)


def allclose(actual, reference, tol: Tolerance) -> bool:
    """Asymmetric elementwise closeness; the second argument is the reference.

    NaN anywhere makes the comparison fail.
    """
    a = np.asarray(_unwrap(actual), dtype=np.float64)
    b = np.asarray(_unwrap(reference), dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"cannot compare shapes {a.shape} and {b.shape}")
    return bool(np.all(np.abs(a - b) <= tol.atol + tol.rtol * np.abs(b)))


def max_deviation(actual, reference) -> tuple[float, float]:
    """(max absolute, max relative) deviation from the reference."""
    a = np.asarray(_unwrap(actual), dtype=np.float64)
    b = np.asarray(_unwrap(reference), dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"cannot compare shapes {a.shape} and {b.shape}")
    diff = np.abs(a - b)
    denom = np.maximum(np.abs(b), _TINY64)
    if diff.size == 0:
        return 0.0, 0.0
    return float(diff.max()), float((diff / denom).max())
