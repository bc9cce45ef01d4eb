"""Explicit allocation bookkeeping for the buffers kernels declare.

This is deliberately not an allocator hook. Ops record the logical
buffers they create (chunk scratch, materialized probabilities, caches)
against a ledger, and tests assert peaks and event counts per tag. The
arithmetic helper `logits_bytes` states the cost being avoided by the
chunked head: batch * seq * vocab * byte_width, exactly.

Tag convention: buffers sized rows x vocab that hold logits or logit
gradients carry a tag starting with "logits". Peak queries filtered on
that prefix are how the chunked-vs-materialized memory claims are checked.
"""

from __future__ import annotations

import csv
import enum
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import NamedTuple


class UnbalancedFree(ValueError):
    """A Free was recorded without matching outstanding bytes for its tag."""


class AllocKind(enum.Enum):
    ALLOC = "alloc"
    FREE = "free"


class LedgerEvent(NamedTuple):
    tag: str
    nbytes: int
    kind: AllocKind
    current: int  # running total after this event
    peak: int  # high-water mark after this event


@dataclass
class AllocationLedger:
    """Append-only event log with running and peak byte totals."""

    events: list[LedgerEvent] = field(default_factory=list)
    current_bytes: int = 0
    peak_bytes: int = 0
    _outstanding: dict[str, int] = field(default_factory=dict)

    def record(self, tag: str, nbytes: int, kind: AllocKind) -> None:
        record(self, tag, nbytes, kind)

    def alloc(self, tag: str, nbytes: int) -> None:
        record(self, tag, nbytes, AllocKind.ALLOC)

    def free(self, tag: str, nbytes: int) -> None:
        record(self, tag, nbytes, AllocKind.FREE)

    def outstanding(self, tag: str) -> int:
        return self._outstanding.get(tag, 0)

    def peak_for(self, prefix: str) -> int:
        """Peak of the running total restricted to tags with this prefix."""
        current = 0
        peak = 0
        for ev in self.events:
            if not ev.tag.startswith(prefix):
                continue
            current += ev.nbytes if ev.kind is AllocKind.ALLOC else -ev.nbytes
            peak = max(peak, current)
        return peak

    def alloc_count(self, prefix: str = "") -> int:
        return sum(
            1 for ev in self.events if ev.kind is AllocKind.ALLOC and ev.tag.startswith(prefix)
        )

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["tag", "bytes", "kind", "current", "peak"])
            for ev in self.events:
                writer.writerow([ev.tag, ev.nbytes, ev.kind.value, ev.current, ev.peak])


def record(ledger: AllocationLedger, tag: str, nbytes: int, kind: AllocKind) -> None:
    """Append one event, keeping totals and per-tag outstanding bytes honest.

    A Free must not exceed what its tag still has outstanding; running
    totals therefore never go negative and the peak never decreases.
    """
    if not isinstance(nbytes, int) or nbytes < 0:
        raise ValueError(f"byte count must be a non-negative int, got {nbytes!r}")
    if kind is AllocKind.ALLOC:
        ledger._outstanding[tag] = ledger._outstanding.get(tag, 0) + nbytes
        ledger.current_bytes += nbytes
        ledger.peak_bytes = max(ledger.peak_bytes, ledger.current_bytes)
    else:
        held = ledger._outstanding.get(tag, 0)
        if nbytes > held:
            raise UnbalancedFree(
                f"free of {nbytes} bytes for tag {tag!r} exceeds outstanding {held}"
            )
        ledger._outstanding[tag] = held - nbytes
        ledger.current_bytes -= nbytes
    ledger.events.append(
        LedgerEvent(tag, nbytes, kind, ledger.current_bytes, ledger.peak_bytes)
    )


@contextmanager
def tracked(ledger: AllocationLedger | None, tag: str, nbytes: int):
    """Scope an Alloc/Free pair around a buffer lifetime. No-op without a ledger."""
    if ledger is not None:
        record(ledger, tag, nbytes, AllocKind.ALLOC)
    try:
        yield
    finally:
        if ledger is not None:
            record(ledger, tag, nbytes, AllocKind.FREE)


def logits_bytes(batch: int, seq: int, vocab: int, byte_width: int) -> int:
    """Exact size of a fully materialized logits tensor, in bytes."""
    for name, v in (("batch", batch), ("seq", seq), ("vocab", vocab), ("byte_width", byte_width)):
        if not isinstance(v, int) or v < 1:
            raise ValueError(f"{name} must be a positive int, got {v!r}")
    return batch * seq * vocab * byte_width
