"""Counter-rate checks run after every return to enclave execution.

The rate check busy-counts ADD-equivalent operations for a short window
(2 ms of corrected counter time) and compares the counter's view of that
window with the operation count's view, using the ops/ms baseline from
calibration. The optional frequency check compares memory-access latency
with instruction latency, which a CPU frequency change shifts but a
counter rescale does not.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from fractions import Fraction

from .calibration import CalibrationResult
from .core import DriftRate, apply_drift, ticks_for_nanos
from .host import (
    EnclaveHost,
    InstructionTimingSample,
    MemoryTimingSample,
    WindowInterrupted,
)


class VerdictKind(enum.Enum):
    PASS = "pass"
    RATE_VIOLATION = "rate_violation"
    FREQUENCY_VIOLATION = "frequency_violation"
    INTERRUPTED = "interrupted"


@dataclass(frozen=True)
class GuardVerdict:
    kind: VerdictKind
    measured_ratio: Fraction | None = None

    @property
    def passed(self) -> bool:
        return self.kind is VerdictKind.PASS


@dataclass(frozen=True)
class GuardConfig:
    window_nanos: int = 2_000_000
    rate_threshold: Fraction = Fraction(5, 100)
    frequency_threshold: Fraction = Fraction(10, 100)
    memory_check: bool = False
    periodic_nanos: int | None = 1_000_000_000

    def __post_init__(self) -> None:
        if self.window_nanos < 1_000_000:
            raise ValueError("guard window must be at least 1 ms")
        object.__setattr__(self, "rate_threshold", Fraction(self.rate_threshold))
        object.__setattr__(self, "frequency_threshold", Fraction(self.frequency_threshold))


def judge_rate(sample: InstructionTimingSample, drift: DriftRate,
               calib: CalibrationResult, threshold: Fraction = Fraction(5, 100)) -> GuardVerdict:
    """Ratio of counter-measured to instruction-measured window length."""
    counter_nanos = apply_drift(sample.window_ticks, drift)
    if sample.ops_counted <= 0 or counter_nanos <= 0:
        return GuardVerdict(VerdictKind.RATE_VIOLATION, Fraction(0))
    instr_nanos = Fraction(sample.ops_counted * 1_000_000) / calib.ops_per_ms
    ratio = counter_nanos / instr_nanos
    if abs(ratio - 1) > threshold:
        return GuardVerdict(VerdictKind.RATE_VIOLATION, ratio)
    return GuardVerdict(VerdictKind.PASS, ratio)


def latency_ratio(instr: InstructionTimingSample, mem: MemoryTimingSample) -> Fraction:
    """Memory latency over instruction latency (operations per access)."""
    if mem.accesses_counted <= 0 or instr.ops_counted <= 0:
        raise ValueError("empty timing sample")
    return Fraction(instr.ops_counted * mem.window_ticks, instr.window_ticks * mem.accesses_counted)


def judge_frequency(instr: InstructionTimingSample, mem: MemoryTimingSample,
                    calib: CalibrationResult,
                    threshold: Fraction = Fraction(10, 100)) -> GuardVerdict:
    if calib.latency_ratio is None:
        raise ValueError("calibration did not record a memory latency baseline")
    ratio = latency_ratio(instr, mem) / calib.latency_ratio
    if abs(ratio - 1) > threshold:
        return GuardVerdict(VerdictKind.FREQUENCY_VIOLATION, ratio)
    return GuardVerdict(VerdictKind.PASS, ratio)


def verify_rate(host: EnclaveHost, calib: CalibrationResult,
                config: GuardConfig = GuardConfig()) -> GuardVerdict:
    target = ticks_for_nanos(config.window_nanos, calib.drift)
    try:
        sample = host.time_instruction_window(target)
    except WindowInterrupted:
        return GuardVerdict(VerdictKind.INTERRUPTED)
    return judge_rate(sample, calib.drift, calib, config.rate_threshold)


def verify_frequency(host: EnclaveHost, calib: CalibrationResult,
                     config: GuardConfig = GuardConfig()) -> GuardVerdict:
    target = ticks_for_nanos(config.window_nanos, calib.drift)
    try:
        instr = host.time_instruction_window(target)
        mem = host.time_memory_window(target)
    except WindowInterrupted:
        return GuardVerdict(VerdictKind.INTERRUPTED)
    return judge_frequency(instr, mem, calib, config.frequency_threshold)
