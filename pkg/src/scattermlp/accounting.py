"""Logical memory accounting for pipeline comparisons.

The ledger records named buffer allocations (and optional frees) with their
logical size rows * cols * 4 bytes; four bytes per element is the storage
contract, independent of the dtype a verification run uses. Peak usage is
the running maximum of simultaneously live bytes.

Phase convention: entries tagged "forward" are buffers the inference pass
allocates; entries tagged "backward" are training-only - activations
retained for the backward pass plus backward scratch and gradients. The
forward-phase view of a training run therefore equals the inference
footprint.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

PHASES = ("forward", "backward")


@dataclass(frozen=True)
class LedgerEntry:
    buffer: str
    phase: str
    rows: int
    cols: int
    bytes: int


class AllocationLedger:
    """Ordered allocation log with liveness replay."""

    def __init__(self):
        self.entries: list[LedgerEntry] = []
        # (entry index, +1 alloc / -1 free), in event order
        self._events: list[tuple[int, int]] = []
        self._live: dict[int, LedgerEntry] = {}

    def alloc(self, buffer: str, rows: int, cols: int, phase: str = "forward") -> None:
        if phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {phase!r}")
        if rows < 0 or cols < 0:
            raise ValueError(f"buffer dimensions must be non-negative, got {rows}x{cols}")
        entry = LedgerEntry(buffer=buffer, phase=phase, rows=rows, cols=cols, bytes=rows * cols * 4)
        idx = len(self.entries)
        self.entries.append(entry)
        self._events.append((idx, +1))
        self._live[idx] = entry

    def free(self, buffer: str) -> None:
        """Release the most recent live allocation with this name."""
        for idx in sorted(self._live, reverse=True):
            if self._live[idx].buffer == buffer:
                del self._live[idx]
                self._events.append((idx, -1))
                return
        raise ValueError(f"no live buffer named {buffer!r}")

    def buffers(self, phase: str | None = None) -> list[LedgerEntry]:
        if phase is None:
            return list(self.entries)
        return [e for e in self.entries if e.phase == phase]

    def total_bytes(self, phase: str | None = None) -> int:
        return sum(e.bytes for e in self.buffers(phase))

    def peak_bytes(self, phase: str | None = None) -> int:
        """Max simultaneously-live bytes, optionally restricted to one phase."""
        live = 0
        peak = 0
        for idx, delta in self._events:
            entry = self.entries[idx]
            if phase is not None and entry.phase != phase:
                continue
            live += delta * entry.bytes
            peak = max(peak, live)
        return peak

    def live_bytes(self) -> int:
        return sum(e.bytes for e in self._live.values())

    def has_shape(self, rows: int, cols: int, phase: str | None = None) -> bool:
        return any(e.rows == rows and e.cols == cols for e in self.buffers(phase))

    def to_csv(self, path=None) -> str:
        """Write entries as buffer,phase,rows,cols,bytes; return the text."""
        sink = io.StringIO()
        writer = csv.writer(sink, lineterminator="\n")
        writer.writerow(["buffer", "phase", "rows", "cols", "bytes"])
        for e in self.entries:
            writer.writerow([e.buffer, e.phase, e.rows, e.cols, e.bytes])
        text = sink.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def __repr__(self) -> str:
        return (
            f"AllocationLedger({len(self.entries)} entries, "
            f"peak={self.peak_bytes()} B, live={self.live_bytes()} B)"
        )
