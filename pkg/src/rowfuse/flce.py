"""Chunked projection head: linear layer into cross entropy without full logits.

The lm-head matmul and the loss are fused by walking the batch in row
chunks. One chunk_rows x vocab scratch buffer is reused for every chunk:
it receives the chunk's logits, cross entropy rewrites it in place into
logit gradients, and the two small matmuls fold those into the hidden
gradient and the weight gradient accumulator. Peak logits storage is
chunk_rows/total_rows of the materialized path.

Chunk sizing targets roughly vocab/hidden chunks, rounded up to a power
of two: chunk_rows = 2**ceil(log2(ceil(BT / ceil(V / H)))).

Mean reduction is applied as one division of the accumulated sums by the
total row count after the chunk loop. Per chunk that is the same scale
factor actual_chunk_rows/total applied to a per-chunk mean; deferring it
keeps mean == sum / total bitwise and makes the result independent of the
chunk schedule up to float addition order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DType, Matrix2D, ShapeMismatch, assert_contiguous
from .memtrack import AllocationLedger, tracked
from .ops import CEResult, Reduction, _check_targets, cross_entropy


def _next_pow2(n: int) -> int:
    return 1 if n <= 1 else 1 << (n - 1).bit_length()


@dataclass(frozen=True)
class ChunkPlan:
    """How a batch of rows is walked: fixed power-of-two chunks, last may be short."""

    chunk_rows: int
    num_chunks: int
    total_rows: int
    scale_ratio: float  # chunk_rows / total_rows, the nominal mean-reduction factor

    def __post_init__(self) -> None:
        if self.total_rows < 1:
            raise ValueError(f"total_rows must be >= 1, got {self.total_rows}")
        c = self.chunk_rows
        if c < 1 or (c & (c - 1)) != 0:
            raise ValueError(f"chunk_rows must be a power of two >= 1, got {c}")
        if c > _next_pow2(self.total_rows):
            raise ValueError(
                f"chunk_rows {c} exceeds next power of two above {self.total_rows} rows"
            )
        want = -(-self.total_rows // c)
        if self.num_chunks != want:
            raise ValueError(f"num_chunks {self.num_chunks} inconsistent, expected {want}")

    @classmethod
    def with_chunk_rows(cls, total_rows: int, chunk_rows: int) -> "ChunkPlan":
        """Plan with an explicit chunk size (testing override)."""
        return cls(
            chunk_rows=chunk_rows,
            num_chunks=-(-total_rows // chunk_rows),
            total_rows=total_rows,
            scale_ratio=chunk_rows / total_rows,
        )


def plan_chunks(total_rows: int, vocab_size: int, hidden_size: int) -> ChunkPlan:
    """Default chunk schedule balancing scratch size against chunk count."""
    if total_rows < 1 or vocab_size < 1 or hidden_size < 1:
        raise ValueError(
            f"dimensions must be >= 1, got rows={total_rows}, "
            f"vocab={vocab_size}, hidden={hidden_size}"
        )
    vocab_per_hidden = -(-vocab_size // hidden_size)
    raw = -(-total_rows // vocab_per_hidden)
    return ChunkPlan.with_chunk_rows(total_rows, _next_pow2(raw))


@dataclass
class ProjectionHead:
    """lm-head weight (hidden x vocab) plus its gradient accumulator."""

    weight: Matrix2D
    grad_accum: Matrix2D

    def __post_init__(self) -> None:
        if (self.weight.rows, self.weight.cols) != (self.grad_accum.rows, self.grad_accum.cols):
            raise ShapeMismatch("grad accumulator shape must match the weight")
        if self.weight.dtype is not self.grad_accum.dtype:
            raise ShapeMismatch("grad accumulator dtype must match the weight")

    @classmethod
    def from_weight(cls, weight: Matrix2D) -> "ProjectionHead":
        return cls(weight, Matrix2D.zeros(weight.rows, weight.cols, weight.dtype))

    @property
    def hidden(self) -> int:
        return self.weight.rows

    @property
    def vocab(self) -> int:
        return self.weight.cols


def flce_forward_backward(
    hidden: Matrix2D,
    head: ProjectionHead,
    targets,
    reduction: Reduction = Reduction.MEAN,
    plan: ChunkPlan | None = None,
    ledger: AllocationLedger | None = None,
    accumulate_in_f64: bool = False,
    workers: int = 0,
) -> tuple[float, Matrix2D, Matrix2D]:
    """Loss plus gradients for hidden and head weight, chunk by chunk.

    The gradient accumulator on `head` is zeroed at entry and returned as
    dweight. With accumulate_in_f64 the weight gradient sums in float64
    regardless of the compute dtype and is cast once at the end.
    """
    assert_contiguous(hidden)
    assert_contiguous(head.weight)
    bt, hd = hidden.rows, hidden.cols
    if hd != head.hidden:
        raise ShapeMismatch(f"hidden width {hd} != head input width {head.hidden}")
    vocab = head.vocab
    t = _check_targets(targets, bt, vocab)
    if plan is None:
        plan = plan_chunks(bt, vocab, hd)
    elif plan.total_rows != bt:
        raise ShapeMismatch(f"plan covers {plan.total_rows} rows, batch has {bt}")

    dt = hidden.dtype.np_dtype
    H = hidden.view2d
    W = head.weight.view2d
    dW = head.grad_accum.view2d
    dW[:] = 0.0
    acc = np.zeros((hd, vocab), dtype=np.float64) if accumulate_in_f64 else dW
    dhidden = np.empty_like(H)
    c = plan.chunk_rows

    chunk_losses = []
    scratch_bytes = c * vocab * hidden.dtype.byte_width
    with tracked(ledger, "logits_chunk", scratch_bytes):
        scratch = np.empty((c, vocab), dtype=dt)
        tmp = np.empty((hd, vocab), dtype=dt)
        for lo in range(0, bt, c):
            hi = min(lo + c, bt)
            r = hi - lo
            block = scratch[:r]
            np.matmul(H[lo:hi], W, out=block)
            logits = Matrix2D(r, vocab, block.reshape(-1), hidden.dtype)
            res: CEResult = cross_entropy(
                logits, t[lo:hi], Reduction.SUM, ledger=ledger, workers=workers
            )
            chunk_losses.append(res.loss)
            # block now holds the chunk's logit gradients
            np.matmul(block, W.T, out=dhidden[lo:hi])
            np.matmul(H[lo:hi].T, block, out=tmp)
            acc += tmp

    total = _sequential_sum(chunk_losses)
    if reduction is Reduction.MEAN:
        total /= bt
        np.divide(dhidden, bt, out=dhidden)
        acc /= bt
    if accumulate_in_f64:
        dW[:] = acc.astype(dt)

    dh = Matrix2D(bt, hd, dhidden.reshape(-1), hidden.dtype)
    return total, dh, head.grad_accum


def _sequential_sum(values) -> float:
    acc = 0.0
    for v in values:
        acc += v
    return acc


def linear_ce_reference(
    hidden: Matrix2D,
    head: ProjectionHead,
    targets,
    reduction: Reduction = Reduction.MEAN,
    ledger: AllocationLedger | None = None,
    workers: int = 0,
) -> tuple[float, Matrix2D, Matrix2D]:
    """Unchunked path: materialize every logit, then one pass of the same math.

    Costs a full rows x vocab buffer; exists as the memory-hungry
    comparison point and as the bitwise target for a single-chunk plan.
    """
    assert_contiguous(hidden)
    assert_contiguous(head.weight)
    bt, hd = hidden.rows, hidden.cols
    if hd != head.hidden:
        raise ShapeMismatch(f"hidden width {hd} != head input width {head.hidden}")
    vocab = head.vocab
    t = _check_targets(targets, bt, vocab)

    dt = hidden.dtype.np_dtype
    H = hidden.view2d
    W = head.weight.view2d
    dW = head.grad_accum.view2d
    dW[:] = 0.0
    dhidden = np.empty_like(H)

    with tracked(ledger, "logits_full", bt * vocab * hidden.dtype.byte_width):
        full = np.empty((bt, vocab), dtype=dt)
        tmp = np.empty((hd, vocab), dtype=dt)
        np.matmul(H, W, out=full)
        logits = Matrix2D(bt, vocab, full.reshape(-1), hidden.dtype)
        res = cross_entropy(logits, t, Reduction.SUM, ledger=ledger, workers=workers)
        np.matmul(full, W.T, out=dhidden)
        np.matmul(H.T, full, out=tmp)
        dW += tmp

    total = res.loss
    if reduction is Reduction.MEAN:
        total /= bt
        np.divide(dhidden, bt, out=dhidden)
        dW /= bt

    dh = Matrix2D(bt, hd, dhidden.reshape(-1), hidden.dtype)
    return total, dh, head.grad_accum
