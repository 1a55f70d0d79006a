from __future__ import annotations

import random
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from triad.calibration import CalibrationParams, CalibrationResult, calibrate
from triad.core import DriftRate, RttEstimate
from triad.guard import GuardConfig, VerdictKind, judge_frequency, judge_rate, verify_frequency, verify_rate
from triad.host import InstructionTimingSample
from triad.sim.host import HostParams, SimulatedHost, VirtualClock
from triad.sim.source import SimulatedSource


def calibrated_host(seed: int = 0):
    clock = VirtualClock()
    host = SimulatedHost(clock, HostParams(exit_model=None), random.Random(seed))
    source = SimulatedSource(host, rng=random.Random(seed))
    params = CalibrationParams(40_000_000, 7_500_000, 50_000_000, total_duration_nanos=300_000_000)
    calib = calibrate(source, params, host, clock=lambda: clock.now, sleep=host.sleep, memory_check=True)
    return host, calib


def attack(host, **kw):
    t = host.clock.now + 1_000
    host.schedule_exit(t, 1_000, **kw)
    host.advance_to(t + 2_000)
    host.clear_exit_flag()


@pytest.mark.parametrize("ratio, kind", [
    (Fraction(9, 10), VerdictKind.RATE_VIOLATION),
    (Fraction(11, 10), VerdictKind.RATE_VIOLATION),
    (Fraction(96, 100), VerdictKind.PASS),
    (Fraction(1), VerdictKind.PASS),
])
def test_rate_attacks(ratio, kind):
    host, calib = calibrated_host()
    attack(host, counter_rate=ratio)
    verdict = verify_rate(host, calib)
    assert verdict.kind is kind
    assert abs(verdict.measured_ratio - ratio) < Fraction(2, 1000)


@pytest.mark.parametrize("scale, kind", [
    (Fraction(1, 2), VerdictKind.FREQUENCY_VIOLATION),
    (Fraction(95, 100), VerdictKind.PASS),
])
def test_frequency_attacks(scale, kind):
    host, calib = calibrated_host()
    attack(host, cpu_scale=scale)
    assert verify_frequency(host, calib).kind is kind


def test_interrupted_window():
    host, calib = calibrated_host()
    host.schedule_exit(host.clock.now + 500_000, 1_000)
    assert verify_rate(host, calib).kind is VerdictKind.INTERRUPTED


def test_frequency_needs_baseline():
    host, calib = calibrated_host()
    bare = CalibrationResult(calib.drift, calib.ops_per_ms, calib.rtt_stats, 1, 1)
    instr = host.time_instruction_window(2_000_000)
    mem = host.time_memory_window(2_000_000)
    with pytest.raises(ValueError):
        judge_frequency(instr, mem, bare)


def test_guard_config_validation():
    with pytest.raises(ValueError):
        GuardConfig(window_nanos=999_999)
    assert GuardConfig(rate_threshold="0.05").rate_threshold == Fraction(1, 20)


CALIB = CalibrationResult(DriftRate.identity(), Fraction(53_830), RttEstimate(70_000), 5, 5)


@settings(max_examples=500)
@given(st.integers(-25, 25))
def test_honest_jitter_never_trips(jitter_units):
    # +-0.05% operation jitter against a 5% threshold
    ops = 107_660 + jitter_units * 2
    sample = InstructionTimingSample(ops, 2_000_000)
    assert judge_rate(sample, CALIB.drift, CALIB).passed


def test_empty_sample_is_a_violation():
    assert judge_rate(InstructionTimingSample(0, 2_000_000), CALIB.drift, CALIB).kind is \
        VerdictKind.RATE_VIOLATION


def test_threshold_edges():
    # counter 5% slow exactly passes; just past it fails
    at_edge = InstructionTimingSample(107_660, 1_900_000)
    assert judge_rate(at_edge, CALIB.drift, CALIB).passed
    past = InstructionTimingSample(107_660, 1_899_999)
    assert not judge_rate(past, CALIB.drift, CALIB).passed
