from __future__ import annotations

import random
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from triad.host import WindowInterrupted
from triad.sim.host import TRIMODAL, ExitModel, HostParams, SimulatedHost, VirtualClock


def quiet_host(**kw) -> SimulatedHost:
    return SimulatedHost(VirtualClock(), HostParams(exit_model=None, **kw), random.Random(3))


def test_counter_monotone_within_epoch():
    host = quiet_host()
    a = host.read_counter()
    host.advance_to(500)
    b = host.read_counter()
    assert b.epoch_id == a.epoch_id and b.ticks >= a.ticks


def test_one_ms_at_unit_rate_is_a_million_ticks():
    host = quiet_host()
    host.advance_to(1_000_000)
    assert host.read_counter().ticks == 1_000_000


def test_counter_rate_scales_ticks():
    host = quiet_host(counter_rate=Fraction(103, 100))
    host.advance_to(1_000_000)
    assert host.read_counter().ticks == 1_030_000


def test_overwrite_changes_epoch():
    host = quiet_host()
    before = host.read_counter()
    host.schedule_exit(1_000, 500, overwrite_ticks=7)
    host.advance_to(2_000)
    after = host.read_counter()
    assert after.epoch_id == before.epoch_id + 1
    assert after.ticks == 7 + 500


def test_exit_flag_lifecycle():
    host = quiet_host()
    assert host.poll_exit_flag().tainted is False
    host.schedule_exit(100, 10)
    host.advance_to(200)
    flag = host.poll_exit_flag()
    assert flag.tainted and flag.exits_observed == 1
    # polling does not clear it
    assert host.poll_exit_flag().tainted
    host.clear_exit_flag()
    assert not host.poll_exit_flag().tainted
    host.clear_exit_flag()
    assert not host.poll_exit_flag().tainted


def test_scripted_exit_count():
    host = quiet_host()
    for i in range(7):
        host.schedule_exit(1_000 * (i + 1), 10)
    host.advance_to(10_000)
    assert host.poll_exit_flag().exits_observed == 7


def test_clear_racing_exit_resolves_by_order():
    host = quiet_host()
    host.schedule_exit(100, 10)
    host.advance_to(99)
    host.clear_exit_flag()
    host.advance_to(200)
    assert host.poll_exit_flag().tainted
    host.clear_exit_flag()
    assert not host.poll_exit_flag().tainted


def test_read_outside_enclave_is_an_error():
    host = quiet_host()
    host.schedule_exit(100, 1_000)
    host.advance_to(500)
    with pytest.raises(RuntimeError):
        host.read_counter()


def test_instruction_window_counts():
    host = quiet_host(ops_jitter=0)
    assert host.time_instruction_window(1_000_000).ops_counted == 53_830
    assert host.time_instruction_window(2_000_000).ops_counted == 107_660


@settings(max_examples=30)
@given(st.integers(1, 1000))
def test_instruction_window_jitter_bounded(seed):
    host = SimulatedHost(VirtualClock(), HostParams(exit_model=None), random.Random(seed))
    ops = host.time_instruction_window(1_000_000).ops_counted
    assert abs(ops - 53_830) <= 53_830 * Fraction(5, 10_000)


def test_window_interrupted_by_exit():
    host = quiet_host()
    host.schedule_exit(500_000, 100)
    with pytest.raises(WindowInterrupted):
        host.time_instruction_window(2_000_000)
    assert host.in_enclave and host.poll_exit_flag().tainted


def test_window_minimum():
    with pytest.raises(ValueError):
        quiet_host().time_instruction_window(999_999)


def test_cpu_scale_affects_instructions_not_memory():
    host = quiet_host(ops_jitter=0)
    host.schedule_exit(10, 10, cpu_scale=Fraction(1, 2))
    host.advance_to(100)
    assert host.time_instruction_window(2_000_000).ops_counted == 53_830
    assert host.time_memory_window(2_000_000).accesses_counted == 20_000


def test_trimodal_model_shape():
    rng = random.Random(11)
    samples = [TRIMODAL.sample_epoch(rng) for _ in range(20_000)]
    top = sum(1 for s in samples if s >= 1_500_000_000) / len(samples)
    assert 0.27 < top < 0.33
    assert max(samples) <= 1_580_000_000


def test_exit_model_validation():
    with pytest.raises(ValueError):
        ExitModel(modes=())
    with pytest.raises(ValueError):
        HostParams(counter_rate=0)
