"""Training-parity harness: a tiny decoder trained two ways must agree.

The model is deliberately small but routes gradients through every kernel
in the library: token embedding, a pre-norm block with a SwiGLU MLP and a
rotation-only attention stub, a second block using GeGLU, a final
layernorm, and the chunked linear cross-entropy head. Plain gradient
descent on a fixed synthetic token stream, identical initialization for
both copies.

Copy A runs the fused kernels, copy B the unfused baselines, both at the
same dtype; their loss curves and final parameters must track within the
configured tolerance. The harness can also replay a known failure mode:
handing the rotation backward a strided gradient view. With layout guards
honored that raises immediately; with the flag ignored the curves drift
apart, which is the whole point of the guard.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import baseline
from .core import DType, Matrix2D, Vector
from .flce import ProjectionHead, flce_forward_backward
from .ops import (
    GluInputs,
    Reduction,
    RotationSpec,
    geglu_backward,
    geglu_forward,
    layernorm_backward,
    layernorm_forward,
    rmsnorm_backward,
    rmsnorm_forward,
    rope_backward,
    rope_forward,
    rotation_thetas,
    swiglu_backward,
    swiglu_forward,
)


class NonFiniteLoss(ArithmeticError):
    """A training step produced a NaN or infinite loss."""


@dataclass
class ConvergeConfig:
    steps: int = 100
    seed: int = 0
    dtype: DType = DType.F32
    lr: float = 0.1  # stable amplification regime for the f32 parity check
    vocab: int = 64
    hidden: int = 16
    mlp: int = 32
    batch: int = 4
    seqlen: int = 16
    path_a: str = "fused"
    path_b: str = "reference"
    replay_noncontiguous: bool = False  # feed the rope backward a strided view (path A)
    guards_enabled: bool = True  # honor the contiguity flag during the replay
    atol: float = 1e-5
    rtol: float = 1e-4


@dataclass
class ConvergenceReport:
    steps: int
    losses_a: list[float] = field(default_factory=list)
    losses_b: list[float] = field(default_factory=list)
    max_loss_diff: float = 0.0
    final_param_diff: float = 0.0
    final_logits_diff: float = 0.0
    passed: bool = False


def _init_params(cfg: ConvergeConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    dt = cfg.dtype.np_dtype
    h, m, v = cfg.hidden, cfg.mlp, cfg.vocab

    def mat(r: int, c: int, scale: float) -> np.ndarray:
        return (rng.standard_normal((r, c)) * scale).astype(dt)

    params = {
        "embed": mat(v, h, 0.5),
        "ln_g": np.ones(h, dtype=dt),
        "ln_b": np.zeros(h, dtype=dt),
        "head": mat(h, v, 1.0 / math.sqrt(h)),
    }
    for b in range(2):
        params[f"g{b}"] = np.ones(h, dtype=dt)
        params[f"wg{b}"] = mat(h, m, 1.0 / math.sqrt(h))
        params[f"bg{b}"] = np.zeros(m, dtype=dt)
        params[f"wv{b}"] = mat(h, m, 1.0 / math.sqrt(h))
        params[f"bv{b}"] = np.zeros(m, dtype=dt)
        params[f"down{b}"] = mat(m, h, 1.0 / math.sqrt(m))
    return params


def _data(cfg: ConvergeConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # fixed stream: same tokens every step, targets are the next token
    rng = np.random.default_rng(cfg.seed + 1)
    tok = rng.integers(0, cfg.vocab, size=(cfg.batch, cfg.seqlen))
    targets = np.roll(tok, -1, axis=1).reshape(-1)
    positions = np.tile(np.arange(cfg.seqlen), cfg.batch)
    return tok.reshape(-1), positions, targets


def _incident_grad(g: np.ndarray, dtype: DType, guards_enabled: bool) -> Matrix2D:
    """Model a gradient that arrived as a transposed (strided) view.

    The physical buffer is in column-major order. With guards enabled the
    wrapper says so and the kernel refuses it; with guards disabled the
    wrapper claims row-major and the kernel reads scrambled memory.
    """
    phys = np.ascontiguousarray(g.T).reshape(-1)
    return Matrix2D(g.shape[0], g.shape[1], phys, dtype, contiguous=not guards_enabled)


def _fused_step(
    params: dict[str, np.ndarray],
    tokens: np.ndarray,
    positions: np.ndarray,
    targets: np.ndarray,
    cfg: ConvergeConfig,
    replay: bool,
) -> tuple[float, dict[str, np.ndarray]]:
    dt = cfg.dtype
    spec = RotationSpec(cfg.hidden, rotation_thetas(cfg.hidden), positions)
    x = params["embed"][tokens]
    saved = []
    for b in range(2):
        xm = Matrix2D.from_array(x, dt)
        ym, res = rmsnorm_forward(xm, Vector(params[f"g{b}"], dt))
        h1 = ym.view2d
        a1 = h1 @ params[f"wg{b}"] + params[f"bg{b}"]
        a2 = h1 @ params[f"wv{b}"] + params[f"bv{b}"]
        glu = GluInputs(Matrix2D.from_array(a1, dt), Matrix2D.from_array(a2, dt))
        gm = swiglu_forward(glu) if b == 0 else geglu_forward(glu)
        mid = gm.view2d @ params[f"down{b}"]
        qr, kr = rope_forward(Matrix2D.from_array(mid, dt), Matrix2D.from_array(mid, dt), spec)
        x = 0.5 * (qr.view2d + kr.view2d)
        saved.append((res, h1, glu, gm))

    yn, res_ln = layernorm_forward(
        Matrix2D.from_array(x, dt), Vector(params["ln_g"], dt), Vector(params["ln_b"], dt)
    )
    head = ProjectionHead.from_weight(Matrix2D.from_array(params["head"], dt))
    loss, dh_m, dw_m = flce_forward_backward(yn, head, targets, Reduction.MEAN)
    grads = {"head": dw_m.view2d}

    dx_m, dg_ln, db_ln = layernorm_backward(dh_m, res_ln, Vector(params["ln_g"], dt))
    grads["ln_g"] = dg_ln.data
    grads["ln_b"] = db_ln.data
    dout = dx_m.view2d
    for b in (1, 0):
        res, h1, glu, gm = saved[b]
        half = 0.5 * dout
        if replay and b == 1:
            dq_in = _incident_grad(half, dt, cfg.guards_enabled)
        else:
            dq_in = Matrix2D.from_array(half, dt)
        dq, dk = rope_backward(dq_in, Matrix2D.from_array(half, dt), spec)
        dmid = dq.view2d + dk.view2d
        grads[f"down{b}"] = gm.view2d.T @ dmid
        dglu = dmid @ params[f"down{b}"].T
        bw = swiglu_backward if b == 0 else geglu_backward
        dx1, dx2 = bw(Matrix2D.from_array(dglu, dt), glu)
        grads[f"wg{b}"] = h1.T @ dx1.view2d
        grads[f"bg{b}"] = dx1.view2d.sum(axis=0)
        grads[f"wv{b}"] = h1.T @ dx2.view2d
        grads[f"bv{b}"] = dx2.view2d.sum(axis=0)
        dh1 = dx1.view2d @ params[f"wg{b}"].T + dx2.view2d @ params[f"wv{b}"].T
        dxm, dgam = rmsnorm_backward(Matrix2D.from_array(dh1, dt), res, Vector(params[f"g{b}"], dt))
        grads[f"g{b}"] = dgam.data
        dout = dxm.view2d

    dembed = np.zeros_like(params["embed"])
    np.add.at(dembed, tokens, dout)
    grads["embed"] = dembed
    return loss, grads


def _reference_step(
    params: dict[str, np.ndarray],
    tokens: np.ndarray,
    positions: np.ndarray,
    targets: np.ndarray,
    cfg: ConvergeConfig,
    replay: bool,
) -> tuple[float, dict[str, np.ndarray]]:
    del replay  # the incident is only injected into the fused path
    thetas = rotation_thetas(cfg.hidden)
    x = params["embed"][tokens]
    saved = []
    for b in range(2):
        y, cache_n = baseline.rmsnorm_forward(x, params[f"g{b}"])
        a1 = y @ params[f"wg{b}"] + params[f"bg{b}"]
        a2 = y @ params[f"wv{b}"] + params[f"bv{b}"]
        if b == 0:
            g, cache_g = baseline.swiglu_forward(a1, a2)
        else:
            g, cache_g = baseline.geglu_forward(a1, a2)
        mid = g @ params[f"down{b}"]
        qr, kr, trig = baseline.rope_forward(mid, mid, thetas, positions)
        x = 0.5 * (qr + kr)
        saved.append((cache_n, y, a1, a2, g, cache_g, trig))

    yn, cache_ln = baseline.layernorm_forward(x, params["ln_g"], params["ln_b"])
    loss, dh, dw = baseline.linear_ce(yn, params["head"], targets, Reduction.MEAN)
    grads = {"head": dw}

    dout, dg_ln, db_ln = baseline.layernorm_backward(dh, cache_ln, params["ln_g"])
    grads["ln_g"] = dg_ln
    grads["ln_b"] = db_ln
    for b in (1, 0):
        cache_n, y, a1, a2, g, cache_g, trig = saved[b]
        half = 0.5 * dout
        dq, dk = baseline.rope_backward(half, half, trig)
        dmid = dq + dk
        grads[f"down{b}"] = g.T @ dmid
        dglu = dmid @ params[f"down{b}"].T
        if b == 0:
            dx1, dx2 = baseline.swiglu_backward(dglu, a2, cache_g)
        else:
            dx1, dx2 = baseline.geglu_backward(dglu, a1, a2, cache_g)
        grads[f"wg{b}"] = y.T @ dx1
        grads[f"bg{b}"] = dx1.sum(axis=0)
        grads[f"wv{b}"] = y.T @ dx2
        grads[f"bv{b}"] = dx2.sum(axis=0)
        dh1 = dx1 @ params[f"wg{b}"].T + dx2 @ params[f"wv{b}"].T
        dout, dgam = baseline.rmsnorm_backward(dh1, cache_n, params[f"g{b}"])
        grads[f"g{b}"] = dgam

    dembed = np.zeros_like(params["embed"])
    np.add.at(dembed, tokens, dout)
    grads["embed"] = dembed
    return loss, grads


_STEPS = {"fused": _fused_step, "reference": _reference_step}


def _forward_logits(
    params: dict[str, np.ndarray],
    tokens: np.ndarray,
    positions: np.ndarray,
    cfg: ConvergeConfig,
) -> np.ndarray:
    """Evaluation forward shared by both copies: plain unfused arithmetic."""
    thetas = rotation_thetas(cfg.hidden)
    x = params["embed"][tokens]
    for b in range(2):
        y, _ = baseline.rmsnorm_forward(x, params[f"g{b}"])
        a1 = y @ params[f"wg{b}"] + params[f"bg{b}"]
        a2 = y @ params[f"wv{b}"] + params[f"bv{b}"]
        g = baseline.swiglu_forward(a1, a2)[0] if b == 0 else baseline.geglu_forward(a1, a2)[0]
        mid = g @ params[f"down{b}"]
        qr, kr, _ = baseline.rope_forward(mid, mid, thetas, positions)
        x = 0.5 * (qr + kr)
    yn, _ = baseline.layernorm_forward(x, params["ln_g"], params["ln_b"])
    return yn @ params["head"]


def _sgd(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
    for key in params:
        params[key] -= lr * grads[key].astype(params[key].dtype, copy=False)


def converge(cfg: ConvergeConfig | None = None) -> ConvergenceReport:
    """Train both copies and report whether their trajectories agree."""
    cfg = cfg or ConvergeConfig()
    base = _init_params(cfg)
    pa = {k: v.copy() for k, v in base.items()}
    pb = {k: v.copy() for k, v in base.items()}
    tokens, positions, targets = _data(cfg)
    step_a = _STEPS[cfg.path_a]
    step_b = _STEPS[cfg.path_b]

    report = ConvergenceReport(steps=cfg.steps)
    for _ in range(cfg.steps):
        loss_a, ga = step_a(pa, tokens, positions, targets, cfg, cfg.replay_noncontiguous)
        loss_b, gb = step_b(pb, tokens, positions, targets, cfg, False)
        if not (math.isfinite(loss_a) and math.isfinite(loss_b)):
            raise NonFiniteLoss(f"loss_a={loss_a}, loss_b={loss_b}")
        report.losses_a.append(float(loss_a))
        report.losses_b.append(float(loss_b))
        _sgd(pa, ga, cfg.lr)
        _sgd(pb, gb, cfg.lr)

    diffs = [abs(a - b) for a, b in zip(report.losses_a, report.losses_b)]
    report.max_loss_diff = max(diffs)
    losses_ok = all(
        abs(a - b) <= cfg.atol + cfg.rtol * abs(b)
        for a, b in zip(report.losses_a, report.losses_b)
    )
    params_ok = True
    param_diff = 0.0
    for k in base:
        a64 = pa[k].astype(np.float64)
        b64 = pb[k].astype(np.float64)
        gap = np.abs(a64 - b64)
        param_diff = max(param_diff, float(np.max(gap)))
        params_ok = params_ok and bool(np.all(gap <= cfg.atol + cfg.rtol * np.abs(b64)))
    report.final_param_diff = param_diff
    la = _forward_logits(pa, tokens, positions, cfg).astype(np.float64)
    lb = _forward_logits(pb, tokens, positions, cfg).astype(np.float64)
    report.final_logits_diff = float(np.max(np.abs(la - lb)))
    logits_ok = bool(np.all(np.abs(la - lb) <= cfg.atol + cfg.rtol * np.abs(lb)))
    report.passed = losses_ok and params_ok and logits_ok
    return report
