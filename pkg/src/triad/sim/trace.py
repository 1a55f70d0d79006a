"""Run traces and the oracle-error summary."""

from __future__ import annotations

import csv
import io
import statistics
from dataclasses import dataclass, field
from pathlib import Path

CSV_HEADER = ("event_nanos", "node", "kind", "value_nanos", "epsilon_nanos", "oracle_error_nanos")


class OracleClock:
    """Ground-truth time for assertions: virtual time plus a fixed epoch offset."""

    def __init__(self, clock, epoch_offset_nanos: int):
        self._clock = clock
        self.epoch_offset_nanos = epoch_offset_nanos

    @property
    def virtual_now_nanos(self) -> int:
        return self._clock.now

    def now(self) -> int:
        return self.epoch_offset_nanos + self._clock.now


@dataclass(frozen=True)
class TraceEvent:
    event_nanos: int
    node: int
    kind: str
    value_nanos: int | None = None
    epsilon_nanos: int | None = None
    oracle_error_nanos: int | None = None
    # not exported; used by conformance tests
    detail: str = ""

    def row(self) -> tuple:
        return (self.event_nanos, self.node, self.kind,
                "" if self.value_nanos is None else self.value_nanos,
                "" if self.epsilon_nanos is None else self.epsilon_nanos,
                "" if self.oracle_error_nanos is None else self.oracle_error_nanos)


@dataclass
class NodeSummary:
    node: int
    serves: int = 0
    mean_error_nanos: float = 0.0
    mean_abs_error_nanos: float = 0.0
    max_abs_error_nanos: int = 0
    bound_violations: int = 0
    monotonic_violations: int = 0


@dataclass
class RunTrace:
    seed: int = 0
    events: list[TraceEvent] = field(default_factory=list)
    counters: dict[int, dict[str, int]] = field(default_factory=dict)

    def append(self, event: TraceEvent) -> None:
        self.events.append(event)

    def of_kind(self, *kinds: str, node: int | None = None) -> list[TraceEvent]:
        return [e for e in self.events if e.kind in kinds and (node is None or e.node == node)]

    def kinds(self, node: int | None = None, skip: tuple[str, ...] = ()) -> list[str]:
        return [e.kind for e in self.events if (node is None or e.node == node) and e.kind not in skip]

    def serves(self, node: int | None = None) -> list[TraceEvent]:
        return self.of_kind("serve", node=node)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for e in self.events:
            writer.writerow(e.row())
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


def read_trace_csv(path: str | Path) -> RunTrace:
    trace = RunTrace()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return trace
        if tuple(header) != CSV_HEADER:
            raise ValueError(f"unexpected trace header {header}")
        for row in reader:
            t, node, kind, value, eps, err = row
            trace.append(TraceEvent(int(t), int(node), kind,
                                    int(value) if value else None,
                                    int(eps) if eps else None,
                                    int(err) if err else None))
    return trace


def oracle_error(trace: RunTrace) -> dict[int, NodeSummary]:
    """Per-node error statistics over served timestamps."""
    out: dict[int, NodeSummary] = {}
    errors: dict[int, list[int]] = {}
    last: dict[int, int] = {}
    for e in trace.serves():
        s = out.setdefault(e.node, NodeSummary(e.node))
        errors.setdefault(e.node, []).append(e.oracle_error_nanos)
        s.serves += 1
        if abs(e.oracle_error_nanos) > e.epsilon_nanos:
            s.bound_violations += 1
        if e.node in last and e.value_nanos <= last[e.node]:
            s.monotonic_violations += 1
        last[e.node] = e.value_nanos
    for node, errs in errors.items():
        s = out[node]
        s.mean_error_nanos = statistics.fmean(errs)
        s.mean_abs_error_nanos = statistics.fmean(abs(x) for x in errs)
        s.max_abs_error_nanos = max(abs(x) for x in errs)
    return out
