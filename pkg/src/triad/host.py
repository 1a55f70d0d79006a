"""The execution environment a node runs in.

Node logic only touches the host through :class:`EnclaveHost`: counter reads,
exit-flag polling and busy-count timing windows. ``triad.sim.host`` provides
the deterministic backend; :class:`RealHost` is a best-effort stand-in for an
actual enclave.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass
from typing import Protocol

from . import kernels


class WindowInterrupted(Exception):
    """An exit happened while a timing window was being measured."""


@dataclass(frozen=True)
class HostCounterReading:
    ticks: int
    epoch_id: int


@dataclass(frozen=True)
class ExitFlag:
    tainted: bool
    exits_observed: int


@dataclass(frozen=True)
class InstructionTimingSample:
    """ADD-equivalent operations counted over ``window_ticks`` raw ticks."""

    ops_counted: int
    window_ticks: int


@dataclass(frozen=True)
class MemoryTimingSample:
    accesses_counted: int
    window_ticks: int


class EnclaveHost(Protocol):
    nominal_hz: int

    def read_counter(self) -> HostCounterReading: ...

    def poll_exit_flag(self) -> ExitFlag: ...

    def clear_exit_flag(self) -> None: ...

    def time_instruction_window(self, target_ticks: int) -> InstructionTimingSample: ...

    def time_memory_window(self, target_ticks: int) -> MemoryTimingSample: ...


MIN_WINDOW_NANOS = 1_000_000


class RealHost:
    """Host backed by the monotonic clock of the running machine.

    Enclave exits cannot be observed portably, so a watchdog stands in for
    the exit flag: any gap between polls longer than ``2 * poll_period`` is
    counted as an exit and starts a new epoch.
    """

    nominal_hz = 1_000_000_000

    def __init__(self, poll_period_nanos: int = 200_000, max_window_gap_nanos: int = 200_000):
        self.poll_period_nanos = poll_period_nanos
        self.max_window_gap_nanos = max_window_gap_nanos
        self._lock = threading.Lock()
        self._epoch = 0
        self._exits = 0
        self._tainted = False
        self._last_poll = time.perf_counter_ns()

    def _watch(self, now: int) -> None:
        if now - self._last_poll > 2 * self.poll_period_nanos:
            self._exits += 1
            self._epoch += 1
            self._tainted = True
        self._last_poll = now

    def read_counter(self) -> HostCounterReading:
        now = time.perf_counter_ns()
        with self._lock:
            self._watch(now)
            return HostCounterReading(now, self._epoch)

    def poll_exit_flag(self) -> ExitFlag:
        now = time.perf_counter_ns()
        with self._lock:
            self._watch(now)
            return ExitFlag(self._tainted, self._exits)

    def clear_exit_flag(self) -> None:
        with self._lock:
            self._tainted = False
            self._last_poll = time.perf_counter_ns()

    def note_exit(self) -> None:
        """Record an exit detected by some other means (e.g. a signal)."""
        with self._lock:
            self._exits += 1
            self._epoch += 1
            self._tainted = True

    def time_instruction_window(self, target_ticks: int) -> InstructionTimingSample:
        if target_ticks < MIN_WINDOW_NANOS * self.nominal_hz // 1_000_000_000:
            raise ValueError("timing windows must be at least 1 ms")
        ops, elapsed, interrupted = kernels.count_ops_window(target_ticks, self.max_window_gap_nanos)
        with self._lock:
            self._last_poll = time.perf_counter_ns()
            if interrupted:
                self._exits += 1
                self._epoch += 1
                self._tainted = True
        if interrupted:
            raise WindowInterrupted("preempted during the timing window")
        return InstructionTimingSample(ops, elapsed)

    def time_memory_window(self, target_ticks: int) -> MemoryTimingSample:
        raise NotImplementedError("memory-latency timing needs the simulated host")
