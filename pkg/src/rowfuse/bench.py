"""Timing, memory, and correctness sweeps over the fused kernels.

Every benchmark case pairs a fused variant against the unfused baseline on
identical inputs. Timing uses wall-clock medians over repeated runs after
warmup; memory uses the allocation ledger, so "peak" means bytes of scratch
and cached intermediates, not process RSS. Correctness checks compare the
fused output against the scalar float64 oracle at small shapes where the
oracle is affordable.

Before any buffers are built, a case declares its working-set size and is
rejected if it exceeds the byte budget. That keeps a typo in a shape sweep
from taking down the machine.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import baseline, oracle, ops
from .core import DType, Matrix2D, Vector
from .flce import ProjectionHead, flce_forward_backward, plan_chunks
from .memtrack import AllocationLedger, AllocKind, record
from .oracle import Tolerance, allclose, max_deviation


class ShapeTooLarge(ValueError):
    """Declared working set exceeds the byte budget."""


class SchemaMismatch(ValueError):
    """A results CSV does not have the expected columns."""


DEFAULT_OPS = ("rmsnorm", "layernorm", "rope", "swiglu", "geglu", "cross_entropy")
ALL_OPS = DEFAULT_OPS + ("linear_ce",)

# column sweeps: hidden sizes for row-wise kernels, vocab sizes for the losses
HIDDEN_SWEEP = (4096, 8192, 12288, 16384)
VOCAB_SWEEP = (40960, 81920, 122880, 163840)

DEFAULT_BUDGET = 16 * 2**30
DEFAULT_REPEATS = 10
_WARMUPS = 3


def default_shapes(op: str) -> tuple[tuple[int, int, int], ...]:
    """(rows, cols, hidden) triples benched for `op` by default; hidden is 0
    except for the fused projection head."""
    if op in ("rmsnorm", "layernorm", "rope"):
        return tuple((256, c, 0) for c in HIDDEN_SWEEP)
    if op in ("swiglu", "geglu"):
        return tuple((r, 512, 0) for r in HIDDEN_SWEEP)
    if op == "cross_entropy":
        return tuple((512, v, 0) for v in VOCAB_SWEEP)
    if op == "linear_ce":
        return tuple((128, v, 256) for v in VOCAB_SWEEP)
    raise ValueError(f"unknown op {op!r}")


def declared_bytes(op: str, rows: int, cols: int, hidden: int, dtype: DType) -> int:
    """Upper bound on bytes both variants of a case will touch, counting
    inputs, outputs, gradients, and whichever variant caches more."""
    bw = dtype.byte_width
    rc = rows * cols
    if op in ("rmsnorm", "layernorm"):
        return (5 * rc + 4 * cols + 2 * rows) * bw
    if op == "rope":
        return 10 * rc * bw
    if op in ("swiglu", "geglu"):
        return 8 * rc * bw
    if op == "cross_entropy":
        return 4 * rc * bw + rows * 8
    if op == "linear_ce":
        chunk = plan_chunks(rows, cols, hidden).chunk_rows
        return (2 * rows * hidden + 3 * hidden * cols + chunk * cols + 2 * rows * cols) * bw
    raise ValueError(f"unknown op {op!r}")


_BENCH_FIELDS = (
    "op",
    "variant",
    "rows",
    "cols",
    "hidden",
    "dtype",
    "repeats",
    "workers",
    "median_s",
    "q20_s",
    "q80_s",
    "peak_bytes",
)


@dataclass(frozen=True)
class BenchRecord:
    op: str
    variant: str  # "fused" or "reference"
    rows: int
    cols: int
    hidden: int
    dtype: str
    repeats: int
    workers: int  # row-parallel threads the fused variant ran with (0 = serial)
    median_s: float
    q20_s: float
    q80_s: float
    peak_bytes: int

    def to_row(self) -> list[str]:
        return [
            self.op,
            self.variant,
            str(self.rows),
            str(self.cols),
            str(self.hidden),
            self.dtype,
            str(self.repeats),
            str(self.workers),
            repr(self.median_s),
            repr(self.q20_s),
            repr(self.q80_s),
            str(self.peak_bytes),
        ]


def write_records(path, records: list[BenchRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_BENCH_FIELDS)
        for rec in records:
            writer.writerow(rec.to_row())


def read_records(path) -> list[BenchRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != list(_BENCH_FIELDS):
            raise SchemaMismatch(f"expected columns {_BENCH_FIELDS}, found {header}")
        out = []
        for row in reader:
            if len(row) != len(_BENCH_FIELDS):
                raise SchemaMismatch(f"row has {len(row)} fields, expected {len(_BENCH_FIELDS)}")
            kw = dict(zip(_BENCH_FIELDS, row))
            try:
                for name in ("rows", "cols", "hidden", "repeats", "workers", "peak_bytes"):
                    kw[name] = int(kw[name])
                for name in ("median_s", "q20_s", "q80_s"):
                    kw[name] = float(kw[name])
            except ValueError as exc:
                raise SchemaMismatch(f"unparseable row {row}: {exc}") from None
            out.append(BenchRecord(**kw))
        return out


@dataclass
class BenchCase:
    op: str
    rows: int
    cols: int
    hidden: int
    dtype: DType
    workers: int
    fused: Callable[[AllocationLedger | None], None]
    reference: Callable[[AllocationLedger | None], None]
    declared: int


def _norm_cached(ledger: AllocationLedger | None, res) -> None:
    # charge the fused norm for the stats it actually keeps around
    if ledger is None:
        return
    nbytes = res.inv_rms.nbytes + (res.mean.nbytes if res.mean is not None else 0)
    record(ledger, "norm_cache", nbytes, AllocKind.ALLOC)
    record(ledger, "norm_cache", nbytes, AllocKind.FREE)


def make_case(
    op: str,
    rows: int,
    cols: int,
    dtype: DType,
    hidden: int = 0,
    seed: int = 0,
    workers: int = 0,
    budget: int = DEFAULT_BUDGET,
) -> BenchCase:
    """Build paired fused/reference closures over shared inputs.

    Each closure runs one full forward+backward round trip, which is the
    unit a training step pays for.
    """
    declared = declared_bytes(op, rows, cols, hidden, dtype)
    if declared > budget:
        raise ShapeTooLarge(
            f"{op} at rows={rows} cols={cols} hidden={hidden} {dtype.value} "
            f"needs ~{declared} bytes, budget is {budget}"
        )

    rng = np.random.default_rng(seed)
    dt = dtype.np_dtype

    def mat(r: int, c: int) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=(r, c)).astype(dt)

    if op in ("rmsnorm", "layernorm"):
        x = mat(rows, cols)
        dy = mat(rows, cols)
        g = np.abs(mat(1, cols)[0]) + 0.5
        b = mat(1, cols)[0]
        xm, dym = Matrix2D.from_array(x, dtype), Matrix2D.from_array(dy, dtype)
        gv, bv = Vector(g, dtype), Vector(b, dtype)
        if op == "rmsnorm":

            def fused(ledger=None):
                _, res = ops.rmsnorm_forward(xm, gv, workers=workers)
                _norm_cached(ledger, res)
                ops.rmsnorm_backward(dym, res, gv, workers=workers)

            def reference(ledger=None):
                _, saved = baseline.rmsnorm_forward(x, g, ledger=ledger)
                baseline.rmsnorm_backward(dy, saved, g, ledger=ledger)

        else:

            def fused(ledger=None):
                _, res = ops.layernorm_forward(xm, gv, bv, workers=workers)
                _norm_cached(ledger, res)
                ops.layernorm_backward(dym, res, gv, workers=workers)

            def reference(ledger=None):
                _, saved = baseline.layernorm_forward(x, g, b, ledger=ledger)
                baseline.layernorm_backward(dy, saved, g, ledger=ledger)

    elif op == "rope":
        q, k = mat(rows, cols), mat(rows, cols)
        dq, dk = mat(rows, cols), mat(rows, cols)
        positions = np.arange(rows, dtype=np.float64) % 4096
        spec = ops.RotationSpec(cols, ops.rotation_thetas(cols), positions)
        qm, km = Matrix2D.from_array(q, dtype), Matrix2D.from_array(k, dtype)
        dqm, dkm = Matrix2D.from_array(dq, dtype), Matrix2D.from_array(dk, dtype)

        def fused(ledger=None):
            ops.rope_forward(qm, km, spec, workers=workers)
            ops.rope_backward(dqm, dkm, spec, workers=workers)

        def reference(ledger=None):
            _, _, trig = baseline.rope_forward(q, k, spec.thetas, positions, ledger=ledger)
            baseline.rope_backward(dq, dk, trig, ledger=ledger)

    elif op in ("swiglu", "geglu"):
        x1, x2, dy = mat(rows, cols), mat(rows, cols), mat(rows, cols)
        glu = ops.GluInputs(Matrix2D.from_array(x1, dtype), Matrix2D.from_array(x2, dtype))
        dym = Matrix2D.from_array(dy, dtype)
        fwd = ops.swiglu_forward if op == "swiglu" else ops.geglu_forward
        bwd = ops.swiglu_backward if op == "swiglu" else ops.geglu_backward

        def fused(ledger=None):
            fwd(glu, workers=workers)
            bwd(dym, glu, workers=workers)

        if op == "swiglu":

            def reference(ledger=None):
                _, saved = baseline.swiglu_forward(x1, x2, ledger=ledger)
                baseline.swiglu_backward(dy, x2, saved, ledger=ledger)

        else:

            def reference(ledger=None):
                _, saved = baseline.geglu_forward(x1, x2, ledger=ledger)
                baseline.geglu_backward(dy, x1, x2, saved, ledger=ledger)

    elif op == "cross_entropy":
        logits = mat(rows, cols)
        flat = logits.reshape(-1)
        targets = rng.integers(0, cols, size=rows)
        work = Matrix2D.zeros(rows, cols, dtype)

        def fused(ledger=None):
            # the kernel overwrites its input with the gradient, so refresh it
            work.data[:] = flat
            ops.cross_entropy(work, targets, ops.Reduction.MEAN, ledger=ledger, workers=workers)

        def reference(ledger=None):
            baseline.cross_entropy(logits, targets, ops.Reduction.MEAN, ledger=ledger)

    elif op == "linear_ce":
        hid = mat(rows, hidden)
        w = (rng.uniform(-1.0, 1.0, size=(hidden, cols)) / np.sqrt(hidden)).astype(dt)
        targets = rng.integers(0, cols, size=rows)
        hm = Matrix2D.from_array(hid, dtype)
        head = ProjectionHead.from_weight(Matrix2D.from_array(w, dtype))

        def fused(ledger=None):
            flce_forward_backward(
                hm, head, targets, ops.Reduction.MEAN, ledger=ledger, workers=workers
            )

        def reference(ledger=None):
            baseline.linear_ce(hid, w, targets, ops.Reduction.MEAN, ledger=ledger)

    else:
        raise ValueError(f"unknown op {op!r}")

    return BenchCase(op, rows, cols, hidden, dtype, workers, fused, reference, declared)


def _timeit(fn: Callable[[], None], repeats: int) -> tuple[float, float, float]:
    for _ in range(_WARMUPS):
        fn()
    samples = np.empty(repeats, dtype=np.float64)
    for i in range(repeats):
        start = time.perf_counter_ns()
        fn()
        samples[i] = (time.perf_counter_ns() - start) / 1e9
    med, q20, q80 = np.quantile(samples, [0.5, 0.2, 0.8])
    return float(med), float(q20), float(q80)


def run_case(case: BenchCase, repeats: int = DEFAULT_REPEATS) -> list[BenchRecord]:
    out = []
    for variant, fn in (("fused", case.fused), ("reference", case.reference)):
        ledger = AllocationLedger()
        fn(ledger)  # untimed instrumented pass for the memory figure
        med, q20, q80 = _timeit(lambda: fn(None), repeats)
        out.append(
            BenchRecord(
                case.op,
                variant,
                case.rows,
                case.cols,
                case.hidden,
                case.dtype.value,
                repeats,
                case.workers if variant == "fused" else 0,
                med,
                q20,
                q80,
                ledger.peak_bytes,
            )
        )
    return out


def run_bench(
    op_names=DEFAULT_OPS,
    shapes=None,
    dtype: DType = DType.F32,
    repeats: int = DEFAULT_REPEATS,
    seed: int = 0,
    workers: int = 0,
    budget: int = DEFAULT_BUDGET,
    progress: Callable[[str], None] | None = None,
) -> list[BenchRecord]:
    """Sweep the requested ops. `shapes` overrides the per-op defaults with
    explicit (rows, cols, hidden) triples applied to every op."""
    records = []
    for op in op_names:
        triples = shapes if shapes is not None else default_shapes(op)
        for rows, cols, hidden in triples:
            case = make_case(op, rows, cols, dtype, hidden, seed, workers, budget)
            if progress is not None:
                progress(f"{op} rows={rows} cols={cols}" + (f" hidden={hidden}" if hidden else ""))
            records.extend(run_case(case, repeats))
    return records


def summarize(records: list[BenchRecord]) -> list[dict]:
    """Merge fused/reference pairs into one row with speedup and memory ratio."""
    by_key: dict[tuple, dict[str, BenchRecord]] = {}
    for rec in records:
        key = (rec.op, rec.rows, rec.cols, rec.hidden, rec.dtype)
        by_key.setdefault(key, {})[rec.variant] = rec
    rows = []
    for (op, r, c, h, dt), pair in sorted(by_key.items()):
        fused, ref = pair.get("fused"), pair.get("reference")
        row = {
            "op": op,
            "rows": r,
            "cols": c,
            "hidden": h,
            "dtype": dt,
            "fused_median_s": fused.median_s if fused else float("nan"),
            "ref_median_s": ref.median_s if ref else float("nan"),
            "fused_peak_bytes": fused.peak_bytes if fused else 0,
            "ref_peak_bytes": ref.peak_bytes if ref else 0,
        }
        row["speedup"] = (
            row["ref_median_s"] / row["fused_median_s"] if fused and ref else float("nan")
        )
        row["mem_ratio"] = (
            row["fused_peak_bytes"] / row["ref_peak_bytes"]
            if ref and ref.peak_bytes > 0
            else float("nan")
        )
        rows.append(row)
    return rows


def format_table(rows: list[dict]) -> str:
    if not rows:
        return "(no results)"
    cols = list(rows[0].keys())
    rendered = [[_fmt_cell(row[c]) for c in cols] for row in rows]
    widths = [max(len(c), *(len(r[i]) for r in rendered)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(cols, widths))]
    for r in rendered:
        lines.append("  ".join(v.rjust(w) for v, w in zip(r, widths)))
    return "\n".join(lines)


def _fmt_cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


# ---------------------------------------------------------------------------
# correctness sweep: fused kernels against the scalar oracle


@dataclass(frozen=True)
class CheckResult:
    op: str
    rows: int
    cols: int
    hidden: int
    dtype: str
    output: str
    max_abs: float
    max_rel: float
    passed: bool


# small enough that the scalar oracle stays fast; degenerate and odd sizes on purpose
CHECK_SHAPES = {
    "rmsnorm": ((1, 1, 0), (8, 64, 0), (5, 257, 0)),
    "layernorm": ((1, 1, 0), (8, 64, 0), (5, 257, 0)),
    "rope": ((1, 2, 0), (8, 64, 0), (6, 18, 0)),
    "swiglu": ((1, 1, 0), (8, 64, 0), (5, 257, 0)),
    "geglu": ((1, 1, 0), (8, 64, 0), (5, 257, 0)),
    "cross_entropy": ((1, 1, 0), (8, 64, 0), (7, 513, 0)),
    "linear_ce": ((1, 1, 1), (8, 64, 16), (12, 257, 8)),
}


def _run_rmsnorm(rows, cols, hidden, dtype, seed):
    rng = np.random.default_rng(seed)
    dt = dtype.np_dtype
    x = rng.uniform(-2, 2, (rows, cols)).astype(dt)
    g = rng.uniform(0.5, 1.5, cols).astype(dt)
    dy = rng.uniform(-1, 1, (rows, cols)).astype(dt)
    y, res = ops.rmsnorm_forward(Matrix2D.from_array(x, dtype), Vector(g, dtype))
    dx, dg = ops.rmsnorm_backward(Matrix2D.from_array(dy, dtype), res, Vector(g, dtype))
    x64, g64, dy64 = (a.astype(np.float64) for a in (x, g, dy))
    ry = oracle.ref_rmsnorm(x64, g64)
    rdx, rdg = oracle.ref_rmsnorm_backward(dy64, x64, g64)
    return [("y", y.view2d, ry), ("dx", dx.view2d, rdx), ("dgamma", dg.data, rdg)]


def _run_layernorm(rows, cols, hidden, dtype, seed):
    rng = np.random.default_rng(seed)
    dt = dtype.np_dtype
    x = rng.uniform(-2, 2, (rows, cols)).astype(dt)
    g = rng.uniform(0.5, 1.5, cols).astype(dt)
    b = rng.uniform(-0.5, 0.5, cols).astype(dt)
    dy = rng.uniform(-1, 1, (rows, cols)).astype(dt)
    y, res = ops.layernorm_forward(
        Matrix2D.from_array(x, dtype), Vector(g, dtype), Vector(b, dtype)
    )
    dx, dg, db = ops.layernorm_backward(Matrix2D.from_array(dy, dtype), res, Vector(g, dtype))
    x64, g64, b64, dy64 = (a.astype(np.float64) for a in (x, g, b, dy))
    ry = oracle.ref_layernorm(x64, g64, b64)
    rdx, rdg, rdb = oracle.ref_layernorm_backward(dy64, x64, g64)
    return [
        ("y", y.view2d, ry),
        ("dx", dx.view2d, rdx),
        ("dgamma", dg.data, rdg),
        ("dbeta", db.data, rdb),
    ]


def _run_rope(rows, cols, hidden, dtype, seed):
    rng = np.random.default_rng(seed)
    dt = dtype.np_dtype
    q = rng.uniform(-1, 1, (rows, cols)).astype(dt)
    k = rng.uniform(-1, 1, (rows, cols)).astype(dt)
    positions = rng.integers(0, 500, size=rows).astype(np.float64)
    spec = ops.RotationSpec(cols, ops.rotation_thetas(cols), positions)
    qr, kr = ops.rope_forward(Matrix2D.from_array(q, dtype), Matrix2D.from_array(k, dtype), spec)
    dq, dk = ops.rope_backward(qr, kr, spec)
    q64, k64 = q.astype(np.float64), k.astype(np.float64)
    rqr, rkr = oracle.ref_rope(q64, k64, spec.thetas, positions)
    rdq, rdk = oracle.ref_rope_backward(rqr, rkr, spec.thetas, positions)
    return [
        ("q_rot", qr.view2d, rqr),
        ("k_rot", kr.view2d, rkr),
        ("dq", dq.view2d, rdq),
        ("dk", dk.view2d, rdk),
    ]


def _run_glu(op: str):
    def runner(rows, cols, hidden, dtype, seed):
        rng = np.random.default_rng(seed)
        dt = dtype.np_dtype
        x1 = rng.uniform(-3, 3, (rows, cols)).astype(dt)
        x2 = rng.uniform(-2, 2, (rows, cols)).astype(dt)
        dy = rng.uniform(-1, 1, (rows, cols)).astype(dt)
        glu = ops.GluInputs(Matrix2D.from_array(x1, dtype), Matrix2D.from_array(x2, dtype))
        dym = Matrix2D.from_array(dy, dtype)
        if op == "swiglu":
            y = ops.swiglu_forward(glu)
            dx1, dx2 = ops.swiglu_backward(dym, glu)
            ry = oracle.ref_swiglu(x1.astype(np.float64), x2.astype(np.float64))
            rdx1, rdx2 = oracle.ref_swiglu_backward(
                dy.astype(np.float64), x1.astype(np.float64), x2.astype(np.float64)
            )
        else:
            y = ops.geglu_forward(glu)
            dx1, dx2 = ops.geglu_backward(dym, glu)
            ry = oracle.ref_geglu(x1.astype(np.float64), x2.astype(np.float64))
            rdx1, rdx2 = oracle.ref_geglu_backward(
                dy.astype(np.float64), x1.astype(np.float64), x2.astype(np.float64)
            )
        return [("y", y.view2d, ry), ("dx1", dx1.view2d, rdx1), ("dx2", dx2.view2d, rdx2)]

    return runner


def _run_cross_entropy(rows, cols, hidden, dtype, seed):
    rng = np.random.default_rng(seed)
    dt = dtype.np_dtype
    logits = rng.uniform(-4, 4, (rows, cols)).astype(dt)
    targets = rng.integers(0, cols, size=rows)
    work = Matrix2D.from_array(logits.copy(), dtype)
    result = ops.cross_entropy(work, targets, ops.Reduction.MEAN)
    rloss, rgrad = oracle.ref_cross_entropy(logits.astype(np.float64), targets, ops.Reduction.MEAN)
    return [
        ("loss", np.array([result.loss]), np.array([rloss])),
        ("dlogits", work.view2d, rgrad),
    ]


def _run_linear_ce(rows, cols, hidden, dtype, seed):
    rng = np.random.default_rng(seed)
    dt = dtype.np_dtype
    hid = rng.uniform(-1, 1, (rows, hidden)).astype(dt)
    w = rng.uniform(-1, 1, (hidden, cols)).astype(dt) / np.sqrt(hidden).astype(dt)
    targets = rng.integers(0, cols, size=rows)
    head = ProjectionHead.from_weight(Matrix2D.from_array(w, dtype))
    loss, dh, dw = flce_forward_backward(
        Matrix2D.from_array(hid, dtype), head, targets, ops.Reduction.MEAN
    )
    rloss, rdh, rdw = oracle.ref_linear_cross_entropy(
        hid.astype(np.float64), w.astype(np.float64), targets, ops.Reduction.MEAN
    )
    return [
        ("loss", np.array([loss]), np.array([rloss])),
        ("dhidden", dh.view2d, rdh),
        ("dweight", dw.view2d, rdw),
    ]


_RUNNERS = {
    "rmsnorm": _run_rmsnorm,
    "layernorm": _run_layernorm,
    "rope": _run_rope,
    "swiglu": _run_glu("swiglu"),
    "geglu": _run_glu("geglu"),
    "cross_entropy": _run_cross_entropy,
    "linear_ce": _run_linear_ce,
}


def run_correctness(
    op_names=ALL_OPS,
    shapes=None,
    dtype: DType = DType.F32,
    seed: int = 0,
    table=None,
) -> list[CheckResult]:
    """Compare each fused op against the float64 oracle.

    `table` may replace individual runners; the self-test uses that to prove
    a broken kernel actually fails the sweep.
    """
    runners = dict(_RUNNERS)
    if table:
        runners.update(table)
    tol = Tolerance.strict() if dtype is DType.F64 else Tolerance.relaxed()
    results = []
    for op in op_names:
        triples = shapes if shapes is not None else CHECK_SHAPES[op]
        for rows, cols, hidden in triples:
            for label, actual, reference in runners[op](rows, cols, hidden, dtype, seed):
                ok = allclose(actual, reference, tol)
                mabs, mrel = max_deviation(actual, reference)
                results.append(
                    CheckResult(op, rows, cols, hidden, dtype.value, label, mabs, mrel, ok)
                )
    return results
