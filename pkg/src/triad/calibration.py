"""Bootstrap-time drift and instruction-rate estimation.

A round asks the trusted source to wait ``pp_nanos`` before replying. The
local side times the whole round in raw ticks; subtracting the round-trip
cost (measured by a few ``pp = 0`` pings) leaves the ticks the counter
advanced while the source waited. A round only counts if it ran inside one
uninterrupted epoch and finished within ``pp + rtt_max``, so an adversary
who delays calibration traffic beyond ``rtt_max`` causes aborts rather than a
skewed rate.
"""

from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Protocol

from .core import DriftRate, ImplausibleRate, RttEstimate, apply_drift, ticks_for_nanos
from .host import (
    EnclaveHost,
    HostCounterReading,
    InstructionTimingSample,
    MemoryTimingSample,
    WindowInterrupted,
)

NANOS_PER_SECOND = 1_000_000_000
DEFAULT_L_NANOS = 1_580_000_000


class CalibrationFailed(Exception):
    pass


class ParamsInadmissible(ValueError):
    pass


class InsufficientSamples(ValueError):
    pass


@dataclass(frozen=True)
class CalibrationParams:
    pp_nanos: int
    rtt_max_nanos: int
    l_nanos: int
    total_duration_nanos: int = 10 * NANOS_PER_SECOND
    ping_rounds: int = 5
    window_nanos: int = 2_000_000
    ops_windows: int = 3
    max_window_retries: int = 50
    # allowed gap between the closing round and the aggregate drift
    agreement: Fraction = Fraction(1, 1000)

    def __post_init__(self) -> None:
        if min(self.pp_nanos, self.rtt_max_nanos, self.l_nanos, self.total_duration_nanos) <= 0:
            raise ValueError("calibration durations must be positive")
        if self.ping_rounds < 1 or self.ops_windows < 1:
            raise ValueError("need at least one ping and one timing window")
        if self.pp_nanos + self.rtt_max_nanos > self.l_nanos:
            raise ParamsInadmissible(
                f"pp + rtt_max = {self.pp_nanos + self.rtt_max_nanos} ns exceeds L = {self.l_nanos} ns")

    @classmethod
    def for_limit(cls, l_nanos: int = DEFAULT_L_NANOS, **kw) -> CalibrationParams:
        """Defaults derived from the in-enclave limit: PP = 0.8 L, RTT_max = 0.15 L."""
        return cls(l_nanos * 8 // 10, l_nanos * 15 // 100, l_nanos, **kw)


@dataclass(frozen=True)
class RoundOutcome:
    pp_nanos: int
    valid: bool
    reason: str
    round_ticks: int | None = None
    ratio: Fraction | None = None


@dataclass(frozen=True)
class CalibrationResult:
    drift: DriftRate
    ops_per_ms: Fraction
    rtt_stats: RttEstimate
    rounds_attempted: int
    rounds_succeeded: int
    latency_ratio: Fraction | None = None

    def __post_init__(self) -> None:
        if self.rounds_succeeded < 1:
            raise ValueError("a calibration result needs at least one valid round")
        if self.ops_per_ms <= 0:
            raise ValueError("ops_per_ms must be positive")


@dataclass(frozen=True)
class CalExchange:
    """What the source reports: how long it waited and its time at reply."""

    elapsed_nanos: int
    remote_nanos: int


class CalibrationSource(Protocol):
    def exchange(self, pp_nanos: int) -> CalExchange | None:
        """One blocking round; ``None`` if the reply never came or was abandoned."""


def nominal_nanos(ticks: int, nominal_hz: int) -> int:
    return ticks * NANOS_PER_SECOND // nominal_hz


@dataclass
class RoundBook:
    """Round bookkeeping shared by the blocking and event-driven drivers."""

    params: CalibrationParams
    nominal_hz: int
    ping_ticks: list[int] = field(default_factory=list)
    outcomes: list[RoundOutcome] = field(default_factory=list)
    # (nanos, ticks, epoch) of the latest remote reading, for provisional reporting
    provisional: tuple[int, int, int] | None = None
    _epoch: tuple[int, int] | None = None

    def note(self, reading: HostCounterReading) -> None:
        """Track where the current epoch started (first reading seen in it)."""
        if self._epoch is None or self._epoch[0] != reading.epoch_id:
            self._epoch = (reading.epoch_id, reading.ticks)

    def fits(self, reading: HostCounterReading) -> bool:
        """Whether a PP round started now can finish before the epoch limit.

        Once an epoch has outlived L the limit evidently does not apply to
        it, so rounds run freely.
        """
        self.note(reading)
        p = self.params
        if self.rtt_ticks is None:
            return True
        in_epoch = nominal_nanos(reading.ticks - self._epoch[1], self.nominal_hz)
        return in_epoch + p.pp_nanos + p.rtt_max_nanos <= p.l_nanos or in_epoch >= p.l_nanos

    @property
    def wait_step_nanos(self) -> int:
        p = self.params
        return max(1_000_000, (p.l_nanos - p.pp_nanos - p.rtt_max_nanos) // 4)

    @property
    def rtt_ticks(self) -> int | None:
        if len(self.ping_ticks) < self.params.ping_rounds:
            return None
        return statistics.median_low(self.ping_ticks)

    def next_pp(self) -> int:
        return 0 if self.rtt_ticks is None else self.params.pp_nanos

    def judge(self, pp: int, sent: HostCounterReading, received: HostCounterReading | None,
              reply: CalExchange | None) -> RoundOutcome:
        p = self.params
        self.note(sent)
        if reply is None or received is None:
            out = RoundOutcome(pp, False, "lost")
        elif received.epoch_id != sent.epoch_id:
            out = RoundOutcome(pp, False, "exit")
        else:
            ticks = received.ticks - sent.ticks
            elapsed = nominal_nanos(ticks, self.nominal_hz)
            if pp == 0:
                if elapsed > p.rtt_max_nanos:
                    out = RoundOutcome(pp, False, "slow", ticks)
                else:
                    self.ping_ticks.append(ticks)
                    out = RoundOutcome(pp, True, "ping", ticks)
            elif elapsed > pp + p.rtt_max_nanos:
                out = RoundOutcome(pp, False, "slow", ticks)
            elif ticks <= self.rtt_ticks or reply.elapsed_nanos <= 0:
                out = RoundOutcome(pp, False, "degenerate", ticks)
            else:
                out = RoundOutcome(pp, True, "ok", ticks,
                                   Fraction(reply.elapsed_nanos, ticks - self.rtt_ticks))
        self.outcomes.append(out)
        return out

    def provisional_estimate(self, received: HostCounterReading, reply: CalExchange,
                             round_ticks: int) -> int:
        """Best local time at ``received`` with what is known so far.

        The estimate runs from the previous remote reading in the same epoch
        at the current median rate; otherwise it re-anchors on this reply.
        """
        prev = self.provisional
        net = max(nominal_nanos(round_ticks, self.nominal_hz) - reply.elapsed_nanos, 0)
        remote = reply.remote_nanos + net // 2
        if prev is not None and prev[2] == received.epoch_id:
            rate = statistics.median_low(self.ratios) if self.ratios else Fraction(
                NANOS_PER_SECOND, self.nominal_hz)
            estimate = prev[0] + math.floor((received.ticks - prev[1]) * rate)
        else:
            estimate = remote
        self.provisional = (remote, received.ticks, received.epoch_id)
        return estimate

    @property
    def ratios(self) -> list[Fraction]:
        return [o.ratio for o in self.outcomes if o.ratio is not None]

    @property
    def rounds_attempted(self) -> int:
        return sum(1 for o in self.outcomes if o.pp_nanos > 0)

    def drift(self) -> DriftRate:
        ratios = self.ratios
        if not ratios:
            raise CalibrationFailed(
                f"no valid calibration round ({self.rounds_attempted} attempted, "
                f"{len(self.ping_ticks)} usable pings)")
        try:
            return aggregate(ratios)
        except ImplausibleRate as exc:
            raise CalibrationFailed(f"implausible drift: {exc}") from None

    def rtt_stats(self, drift: DriftRate) -> RttEstimate:
        ticks = self.rtt_ticks if self.rtt_ticks is not None else 0
        return RttEstimate(apply_drift(ticks, drift))


def aggregate(ratios: list[Fraction]) -> DriftRate:
    """Median of per-round ratios."""
    return DriftRate.from_ratio(statistics.median(ratios))


def ops_per_ms_from(samples: list[InstructionTimingSample], drift: DriftRate) -> Fraction:
    rates = [Fraction(s.ops_counted * 1_000_000, apply_drift(s.window_ticks, drift)) for s in samples]
    return statistics.median(rates)


def latency_baseline(instr: list[InstructionTimingSample], mem: list[MemoryTimingSample]) -> Fraction:
    from .guard import latency_ratio

    return statistics.median(latency_ratio(i, m) for i, m in zip(instr, mem))


def estimate_L(samples: list[int], quantile: Fraction = Fraction(999, 1000),
               hard_max_nanos: int | None = None) -> int:
    """High nearest-rank quantile of observed epoch lengths."""
    if len(samples) < 100:
        raise InsufficientSamples(f"need at least 100 epoch lengths, got {len(samples)}")
    q = Fraction(quantile)
    if not 0 < q <= 1:
        raise ValueError("quantile must be in (0, 1]")
    ordered = sorted(samples)
    value = ordered[max(math.ceil(q * len(ordered)) - 1, 0)]
    return min(value, hard_max_nanos) if hard_max_nanos is not None else value


def _sleep_ns(nanos: int) -> None:
    time.sleep(nanos / NANOS_PER_SECOND)


def check_agreement(drift: DriftRate, closing: Fraction, tolerance: Fraction) -> None:
    """The closing round must match the aggregate; otherwise the counter
    rate changed between rounds and the baseline would be wrong."""
    if abs(closing / drift.ratio - 1) > tolerance:
        raise CalibrationFailed(
            f"closing round ratio {float(closing):.6f} disagrees with aggregate "
            f"{float(drift.ratio):.6f}: counter rate changed during calibration")


def calibrate(source: CalibrationSource, params: CalibrationParams, host: EnclaveHost, *,
              clock: Callable[[], int] = time.monotonic_ns,
              sleep: Callable[[int], None] = _sleep_ns,
              memory_check: bool = False) -> CalibrationResult:
    """Blocking driver: rounds until the budget runs out, then a closing
    round followed by timing windows in the same epoch.

    ``clock`` and ``sleep`` only meter the budget and pacing; they are the
    untrusted OS clock and cannot bias the estimate.
    """
    book = RoundBook(params, host.nominal_hz)

    def one_round() -> RoundOutcome | None:
        pp = book.next_pp()
        host.clear_exit_flag()
        sent = host.read_counter()
        if pp and not book.fits(sent):
            sleep(book.wait_step_nanos)
            return None
        reply = source.exchange(pp)
        received = host.read_counter() if reply is not None else None
        return book.judge(pp, sent, received, reply)

    start = clock()
    while clock() - start < params.total_duration_nanos:
        one_round()
    drift = book.drift()
    target = ticks_for_nanos(params.window_nanos, drift)
    retries = 0
    while True:
        if retries > params.max_window_retries:
            raise CalibrationFailed("could not finish the closing round and timing windows")
        out = one_round()
        if out is None or out.ratio is None:
            retries += 1
            continue
        check_agreement(drift, out.ratio, params.agreement)
        instr: list[InstructionTimingSample] = []
        mem: list[MemoryTimingSample] = []
        try:
            for _ in range(params.ops_windows):
                instr.append(host.time_instruction_window(target))
                if memory_check:
                    mem.append(host.time_memory_window(target))
        except WindowInterrupted:
            retries += 1
            continue
        break
    return CalibrationResult(
        drift,
        ops_per_ms_from(instr, drift),
        book.rtt_stats(drift),
        book.rounds_attempted,
        len(book.ratios),
        latency_baseline(instr, mem) if memory_check else None,
    )


class CalibrationSession:
    """Event-driven calibration for a node that cannot block.

    The owner forwards replies via :meth:`on_reply` and exits via
    :meth:`on_reentry`; an exit abandons the round in flight and the next
    round starts at once, so rounds tend to begin at an epoch boundary.
    After the budget a closing round runs, then the timing windows; an exit
    anywhere in that stretch sends it back to the closing round.
    """

    def __init__(self, host: EnclaveHost, params: CalibrationParams, *,
                 send_request: Callable[[int], bytes],
                 call_later: Callable[..., object],
                 cancel: Callable[[object], None],
                 start_window: Callable[[str, int, Callable], None],
                 on_done: Callable[[CalibrationResult | CalibrationFailed], None],
                 record: Callable[..., None] = lambda *a, **k: None,
                 memory_check: bool = False):
        self.host = host
        self.params = params
        self.book = RoundBook(params, host.nominal_hz)
        self._send = send_request
        self._call_later = call_later
        self._cancel = cancel
        self._start_window = start_window
        self._on_done = on_done
        self._record = record
        self.memory_check = memory_check
        self._inflight: tuple[bytes, int, HostCounterReading, object] | None = None
        self._phase = "idle"
        self._budget_timer = None
        self._wait_timer = None
        self._drift: DriftRate | None = None
        self._instr: list[InstructionTimingSample] = []
        self._mem: list[MemoryTimingSample] = []
        self._pending_instr: InstructionTimingSample | None = None
        self._retries = 0

    @property
    def active(self) -> bool:
        return self._phase in ("rounds", "closing", "windows")

    def start(self) -> None:
        self._phase = "rounds"
        self._budget_timer = self._call_later(self.params.total_duration_nanos, self._budget_spent)
        self._next_round()

    def _next_round(self) -> None:
        if self._phase not in ("rounds", "closing"):
            return
        pp = self.book.next_pp()
        self.host.clear_exit_flag()
        sent = self.host.read_counter()
        if pp and not self.book.fits(sent):
            self._wait_timer = self._call_later(self.book.wait_step_nanos, self._wake)
            return
        nonce = self._send(pp)
        timeout = pp + self.params.rtt_max_nanos * 2
        timer = self._call_later(timeout, self._timed_out, nonce)
        self._inflight = (nonce, pp, sent, timer)

    def _wake(self) -> None:
        self._wait_timer = None
        if self._inflight is None:
            self._next_round()

    def _close(self, received, reply) -> RoundOutcome:
        nonce, pp, sent, timer = self._inflight
        self._inflight = None
        self._cancel(timer)
        out = self.book.judge(pp, sent, received, reply)
        self._record("calibration_round", value=out.round_ticks, detail=f"pp={pp} {out.reason}")
        if out.valid:
            estimate = self.book.provisional_estimate(received, reply, out.round_ticks)
            self._record("calibration_estimate", value=estimate)
        return out

    def _after_round(self, out: RoundOutcome) -> None:
        if self._phase == "closing":
            if out.ratio is None:
                self._retry_closing()
                return
            try:
                check_agreement(self._drift, out.ratio, self.params.agreement)
            except CalibrationFailed as exc:
                self._fail(exc)
                return
            self._phase = "windows"
            self._instr, self._mem, self._pending_instr = [], [], None
            self._next_window()
            return
        self._next_round()

    def on_reply(self, echo_nonce: bytes, elapsed_nanos: int, remote_nanos: int) -> None:
        if self._inflight is None or echo_nonce != self._inflight[0]:
            return
        received = self.host.read_counter()
        if self.host.poll_exit_flag().tainted:
            # an exit slipped in between: the round spans two epochs
            received = None
        self._after_round(self._close(received, CalExchange(elapsed_nanos, remote_nanos) if received else None))

    def _timed_out(self, nonce: bytes) -> None:
        if self._inflight is None or self._inflight[0] != nonce:
            return
        self._after_round(self._close(None, None))

    def on_reentry(self) -> None:
        if self._phase not in ("rounds", "closing"):
            return
        if self._inflight is not None:
            nonce, pp, sent, timer = self._inflight
            self._cancel(timer)
            self._inflight = None
            self.book.outcomes.append(RoundOutcome(pp, False, "exit"))
            self._record("calibration_round", detail=f"pp={pp} exit")
        if self._wait_timer is not None:
            self._cancel(self._wait_timer)
            self._wait_timer = None
        if self._phase == "closing":
            self._retry_closing()
        else:
            self._next_round()

    def _budget_spent(self) -> None:
        if self._phase != "rounds":
            return
        try:
            self._drift = self.book.drift()
        except CalibrationFailed as exc:
            self._fail(exc)
            return
        self._phase = "closing"
        # a round already in flight serves as the closing round
        if self._inflight is None and self._wait_timer is None:
            self._next_round()

    def _retry_closing(self) -> None:
        self._retries += 1
        if self._retries > self.params.max_window_retries:
            self._fail(CalibrationFailed("could not finish the closing round and timing windows"))
            return
        self._phase = "closing"
        self._next_round()

    def _next_window(self) -> None:
        kind = "memory" if self._pending_instr is not None else "instruction"
        target = ticks_for_nanos(self.params.window_nanos, self._drift)
        self._start_window(kind, target, self._window_done)

    def _window_done(self, result) -> None:
        if self._phase != "windows":
            return
        if isinstance(result, WindowInterrupted):
            self._retry_closing()
            return
        if isinstance(result, MemoryTimingSample):
            self._instr.append(self._pending_instr)
            self._mem.append(result)
            self._pending_instr = None
        elif self.memory_check:
            self._pending_instr = result
        else:
            self._instr.append(result)
        if len(self._instr) < self.params.ops_windows:
            self._next_window()
            return
        self._phase = "done"
        drift = self._drift
        self._on_done(CalibrationResult(
            drift,
            ops_per_ms_from(self._instr, drift),
            self.book.rtt_stats(drift),
            self.book.rounds_attempted,
            len(self.book.ratios),
            latency_baseline(self._instr, self._mem) if self.memory_check else None,
        ))

    def _fail(self, exc: CalibrationFailed) -> None:
        self.abort()
        self._phase = "failed"
        self._on_done(exc)

    def abort(self) -> None:
        if self._inflight is not None:
            self._cancel(self._inflight[3])
            self._inflight = None
        for timer in (self._budget_timer, self._wait_timer):
            if timer is not None:
                self._cancel(timer)
        self._wait_timer = None
        self._phase = "aborted"
