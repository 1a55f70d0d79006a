"""Deterministic enclave host driven by virtual time.

The host owns its exit timeline: natural exits drawn from an
:class:`ExitModel` plus exits scripted by the adversary. Whoever drives the
clock (the engine, or :meth:`SimulatedHost.advance_to` in standalone use)
calls :meth:`begin_exit` / :meth:`end_exit` at the right instants.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from fractions import Fraction

from ..host import (
    MIN_WINDOW_NANOS,
    ExitFlag,
    HostCounterReading,
    InstructionTimingSample,
    MemoryTimingSample,
    WindowInterrupted,
)

NANOS_PER_SECOND = 1_000_000_000
JITTER_SCALE = 10_000_000


@dataclass(frozen=True)
class ExitMode:
    weight: Fraction
    low_nanos: int
    high_nanos: int


@dataclass(frozen=True)
class ExitModel:
    """In-enclave period distribution plus how long each exit lasts.

    The default has three narrow modes (a 100 Hz timer tick, a ~0.5 s
    cluster, and 30% of periods just under the 1.58 s hard maximum).
    """

    modes: tuple[ExitMode, ...] = (
        ExitMode(Fraction(40, 100), 9_000_000, 11_000_000),
        ExitMode(Fraction(30, 100), 450_000_000, 550_000_000),
        ExitMode(Fraction(30, 100), 1_500_000_000, 1_580_000_000),
    )
    duration_low_nanos: int = 2_000
    duration_high_nanos: int = 20_000

    def __post_init__(self) -> None:
        if not self.modes:
            raise ValueError("exit model needs at least one mode")
        if sum(m.weight for m in self.modes) != 1:
            raise ValueError("mode weights must sum to 1")
        for m in self.modes:
            if not 0 < m.low_nanos <= m.high_nanos:
                raise ValueError("bad mode range")

    @property
    def hard_max_nanos(self) -> int:
        return max(m.high_nanos for m in self.modes)

    def sample_epoch(self, rng: random.Random) -> int:
        u = Fraction(rng.randrange(1 << 30), 1 << 30)
        acc = Fraction(0)
        for mode in self.modes:
            acc += mode.weight
            if u < acc:
                break
        return rng.randint(mode.low_nanos, mode.high_nanos)

    def sample_duration(self, rng: random.Random) -> int:
        return rng.randint(self.duration_low_nanos, self.duration_high_nanos)


TRIMODAL = ExitModel()


@dataclass
class HostParams:
    nominal_hz: int = NANOS_PER_SECOND
    counter_rate: Fraction = Fraction(1)
    ops_per_ms: int = 53_830
    # relative half-width of the uniform jitter on counted operations
    ops_jitter: Fraction = Fraction(5, 10_000)
    mem_access_nanos: int = 100
    exit_model: ExitModel | None = TRIMODAL

    def __post_init__(self) -> None:
        self.counter_rate = Fraction(self.counter_rate).limit_denominator(1_000_000)
        self.ops_jitter = Fraction(self.ops_jitter)
        if self.counter_rate <= 0 or self.nominal_hz <= 0 or self.ops_per_ms <= 0:
            raise ValueError("rates must be positive")


class VirtualClock:
    """Ground-truth time. Node logic never reads it."""

    def __init__(self, start: int = 0):
        self.now = start

    def advance_to(self, t: int) -> None:
        if t < self.now:
            raise ValueError(f"virtual time cannot go back ({t} < {self.now})")
        self.now = t


@dataclass(order=True)
class ScriptedExit:
    at: int
    duration: int = field(compare=False)
    counter_rate: Fraction | None = field(default=None, compare=False)
    overwrite_ticks: int | None = field(default=None, compare=False)
    cpu_scale: Fraction | None = field(default=None, compare=False)


@dataclass(frozen=True)
class WindowPlan:
    real_nanos: int
    sample: InstructionTimingSample | MemoryTimingSample
    interrupt_at: int | None


class SimulatedHost:
    def __init__(self, clock: VirtualClock, params: HostParams | None = None,
                 rng: random.Random | None = None):
        self.clock = clock
        self.params = params or HostParams()
        self.nominal_hz = self.params.nominal_hz
        self.rng = rng or random.Random(0)
        self.in_enclave = True
        self.epoch_id = 0
        self.epoch_start = clock.now
        self.epoch_base_ticks = 0
        self.rate = self.params.counter_rate
        self.cpu_scale = Fraction(1)
        self.tainted = False
        self.exits = 0
        self.epoch_lengths: list[int] = []
        self.scripted: list[ScriptedExit] = []
        self.reentry_at: int | None = None
        self._pending: dict[str, object] = {}
        self.next_natural = self._draw_natural()

    # -- counter model -------------------------------------------------

    def _draw_natural(self) -> int | None:
        model = self.params.exit_model
        if model is None:
            return None
        return self.epoch_start + model.sample_epoch(self.rng)

    def tick_params(self) -> tuple[int, int]:
        """``(mul, div)`` with ``ticks = base + (t - start) * mul // div``."""
        return self.rate.numerator * self.nominal_hz, self.rate.denominator * NANOS_PER_SECOND

    def ticks_at(self, t: int) -> int:
        mul, div = self.tick_params()
        return self.epoch_base_ticks + (t - self.epoch_start) * mul // div

    def read_counter(self) -> HostCounterReading:
        if not self.in_enclave:
            raise RuntimeError("counter read while outside the enclave")
        return HostCounterReading(self.ticks_at(self.clock.now), self.epoch_id)

    def poll_exit_flag(self) -> ExitFlag:
        return ExitFlag(self.tainted, self.exits)

    def clear_exit_flag(self) -> None:
        self.tainted = False

    # -- exit timeline ---------------------------------------------------

    def schedule_exit(self, at: int, duration: int, *, counter_rate=None,
                      overwrite_ticks: int | None = None, cpu_scale=None) -> None:
        if duration < 1:
            raise ValueError("exit duration must be at least 1 ns")
        ev = ScriptedExit(
            at, duration,
            None if counter_rate is None else Fraction(counter_rate).limit_denominator(1_000_000),
            overwrite_ticks,
            None if cpu_scale is None else Fraction(cpu_scale),
        )
        # stable insertion keeps same-instant scripts in schedule order
        i = len(self.scripted)
        while i and self.scripted[i - 1].at > at:
            i -= 1
        self.scripted.insert(i, ev)

    def next_exit_at(self) -> int | None:
        """When the current epoch ends, or ``None`` if nothing is pending."""
        if not self.in_enclave:
            return None
        candidates = [t for t in (self.next_natural,) if t is not None]
        if self.scripted:
            candidates.append(max(self.scripted[0].at, self.epoch_start))
        return min(candidates) if candidates else None

    def _absorb(self, ev: ScriptedExit) -> None:
        if ev.counter_rate is not None:
            self._pending["rate"] = ev.counter_rate
        if ev.overwrite_ticks is not None:
            self._pending["overwrite"] = ev.overwrite_ticks
        if ev.cpu_scale is not None:
            self._pending["cpu"] = ev.cpu_scale

    def begin_exit(self) -> int:
        """Leave the enclave now; returns the re-entry instant."""
        now = self.clock.now
        if not self.in_enclave:
            raise RuntimeError("already outside the enclave")
        self.in_enclave = False
        self.tainted = True
        self.exits += 1
        self.epoch_lengths.append(now - self.epoch_start)
        duration = 0
        while self.scripted and self.scripted[0].at <= now:
            ev = self.scripted.pop(0)
            duration = max(duration, ev.duration)
            self._absorb(ev)
        if duration == 0:
            model = self.params.exit_model
            duration = model.sample_duration(self.rng) if model else 1
        reentry = now + duration
        # scripts landing inside this exit extend it
        while self.scripted and self.scripted[0].at <= reentry:
            ev = self.scripted.pop(0)
            reentry = max(reentry, ev.at + ev.duration)
            self._absorb(ev)
        self.reentry_at = reentry
        return reentry

    def end_exit(self) -> None:
        now = self.clock.now
        if self.in_enclave or self.reentry_at is None or now < self.reentry_at:
            raise RuntimeError("re-entry before the exit ended")
        # the counter keeps running through the exit at the old rate
        base = self.ticks_at(now)
        base = self._pending.pop("overwrite", base)
        self.rate = self._pending.pop("rate", self.rate)
        self.cpu_scale = self._pending.pop("cpu", self.cpu_scale)
        self.epoch_base_ticks = base
        self.epoch_start = now
        self.epoch_id += 1
        self.in_enclave = True
        self.reentry_at = None
        self.next_natural = self._draw_natural()

    def advance_to(self, t: int) -> None:
        """Standalone driver: run the exit timeline up to ``t``."""
        while True:
            if self.in_enclave:
                nxt = self.next_exit_at()
                if nxt is None or nxt > t:
                    break
                self.clock.advance_to(max(nxt, self.clock.now))
                self.begin_exit()
            else:
                if self.reentry_at > t:
                    break
                self.clock.advance_to(self.reentry_at)
                self.end_exit()
        self.clock.advance_to(t)

    def sleep(self, nanos: int) -> None:
        """Standalone driver: let ``nanos`` pass, ending inside the enclave."""
        self.advance_to(self.clock.now + nanos)
        if not self.in_enclave:
            self.advance_to(self.reentry_at)

    # -- timing windows --------------------------------------------------

    def _jitter(self, value: int) -> int:
        half = int(self.params.ops_jitter * JITTER_SCALE)
        k = self.rng.randint(-half, half) if half else 0
        return value * (JITTER_SCALE + k) // JITTER_SCALE

    def _window_real_nanos(self, target_ticks: int) -> int:
        mul, div = self.tick_params()
        return -((-target_ticks * div) // mul)

    def plan_window(self, kind: str, target_ticks: int) -> WindowPlan:
        min_ticks = MIN_WINDOW_NANOS * self.nominal_hz // NANOS_PER_SECOND
        if target_ticks < min_ticks:
            raise ValueError("timing windows must be at least 1 ms of counter time")
        real = self._window_real_nanos(target_ticks)
        if kind == "instruction":
            ops = self.params.ops_per_ms * self.cpu_scale * real / 1_000_000
            sample = InstructionTimingSample(self._jitter(int(ops)), target_ticks)
        elif kind == "memory":
            accesses = real // self.params.mem_access_nanos
            sample = MemoryTimingSample(self._jitter(accesses), target_ticks)
        else:
            raise ValueError(f"unknown window kind {kind!r}")
        nxt = self.next_exit_at()
        start = self.clock.now
        interrupt = nxt if nxt is not None and nxt < start + real else None
        return WindowPlan(real, sample, interrupt)

    def _run_window(self, kind: str, target_ticks: int):
        plan = self.plan_window(kind, target_ticks)
        if plan.interrupt_at is not None:
            self.advance_to(plan.interrupt_at)
            if self.in_enclave:
                self.begin_exit()
            self.advance_to(self.reentry_at)
            raise WindowInterrupted(f"exit during {kind} window")
        self.advance_to(self.clock.now + plan.real_nanos)
        return plan.sample

    def time_instruction_window(self, target_ticks: int) -> InstructionTimingSample:
        return self._run_window("instruction", target_ticks)

    def time_memory_window(self, target_ticks: int) -> MemoryTimingSample:
        return self._run_window("memory", target_ticks)
