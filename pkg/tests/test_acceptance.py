"""Acceptance criteria, one test (or a few) per criterion.

Run ``pytest tests/test_acceptance.py -v``; a summary with one PASS/FAIL
line per criterion is printed at the end of the session.
"""

from __future__ import annotations

import json
import random
from dataclasses import replace
from fractions import Fraction

import pytest
from conftest import FAST_CAL, quiet_topology, stress_topology
from test_wire import SAMPLES, _independent_datagram, golden_vectors

from triad.calibration import CalibrationFailed, CalibrationParams, calibrate
from triad.config import ExperimentSpec
from triad.core import ticks_for_nanos
from triad.experiments import SCENARIOS, run_experiment
from triad.guard import judge_rate
from triad.host import WindowInterrupted
from triad.sim.engine import Simulator, run_simulation
from triad.sim.host import HostParams, SimulatedHost, VirtualClock
from triad.sim.schedule import parse_schedule, random_schedule
from triad.sim.source import SimulatedSource
from triad.sim.trace import oracle_error
from triad.wire import ReplayDetected, ReplayWindow, WireError, decode, encode

SECOND = 1_000_000_000
STRESS_SEEDS = range(1, 51)


# -- 1 and 2: monotonicity and bounded error under random attacks --------------

@pytest.fixture(scope="module")
def stress_runs():
    runs = {}
    for seed in STRESS_SEEDS:
        schedule = random_schedule(seed, [1, 2, 3], 400_000_000, 3 * SECOND, events=40)
        runs[seed] = oracle_error(run_simulation(stress_topology(), schedule, 3 * SECOND, seed))
    return runs


@pytest.mark.acceptance(1, "strict monotonicity over randomized attack schedules")
def test_strict_monotonicity(stress_runs, record_property):
    serves = sum(s.serves for stats in stress_runs.values() for s in stats.values())
    bad = {seed: [n for n, s in stats.items() if s.monotonic_violations]
           for seed, stats in stress_runs.items()}
    bad = {k: v for k, v in bad.items() if v}
    record_property("detail", f"{serves} serves, seeds {STRESS_SEEDS.start}-{STRESS_SEEDS.stop - 1}, "
                              f"violating seeds {sorted(bad) or 'none'}")
    assert len(stress_runs) >= 50
    assert serves >= 1_000_000
    assert not bad


@pytest.mark.acceptance(2, "|served - oracle| <= epsilon for every serve")
def test_bounded_error_stress(stress_runs, record_property):
    violations = sum(s.bound_violations for stats in stress_runs.values() for s in stats.values())
    record_property("detail", f"stress: {violations} violations")
    assert violations == 0


@pytest.mark.acceptance(2, "|served - oracle| <= epsilon for every serve")
@pytest.mark.parametrize("name", sorted(SCENARIOS))
def test_bounded_error_scenarios(name, tmp_path, record_property):
    duration = min(SCENARIOS[name].duration_nanos, 60 * SECOND)
    result = run_experiment(ExperimentSpec(name, 1, duration, output_dir=tmp_path))
    nodes = result.summary["nodes"].values()
    violations = sum(n["bound_violations"] for n in nodes)
    record_property("detail", f"{name}: {sum(n['serves'] for n in nodes)} serves, {violations} violations")
    assert violations == 0
    assert sum(n["monotonic_violations"] for n in nodes) == 0


# -- 3: the increment rule -----------------------------------------------------

@pytest.mark.acceptance(3, "peer reply below cache gives SelfUntaint of exactly +1 unit")
def test_self_untaint_increment(record_property):
    sim = Simulator(quiet_topology(), parse_schedule("1000000000 FORCE_EXIT node=1\n", 1), 1_200_000_000, 1)
    ahead = {}

    def push_ahead():
        rt = sim.runtimes[1]
        sim._sweep(rt)
        node = rt.node
        node.cache.last = replace(node.cache.last, nanos=node.cache.last.nanos + 5_000_000)
        ahead["nanos"] = node.cache.last.nanos

    sim._at(999_000_000, push_ahead)
    trace = sim.run()
    (reply,) = trace.of_kind("peer_reply", node=2)
    (untaint,) = trace.of_kind("self_untaint", node=1)
    assert reply.value_nanos < ahead["nanos"]
    record_property("detail", f"cache {ahead['nanos']} -> {untaint.value_nanos}")
    assert untaint.value_nanos - ahead["nanos"] == 1


# -- 4: golden scenarios ---------------------------------------------------------

NOISE = ("cache", "calibration_estimate", "serve", "calibration_round", "ping_round",
         "local_reads", "peer_reads", "external_reads", "bootstrap_seeds")


def story(trace, after):
    return [(e.node, e.kind, e.detail) for e in trace.events if e.kind not in NOISE and e.event_nanos >= after]


def golden_run(text, duration=1_500_000_000):
    return run_simulation(quiet_topology(clients=5_000_000), parse_schedule(text, 1), duration, 1)


SCENARIO_2 = [
    (1, "exit", ""), (1, "reentry", ""), (1, "taint", ""), (1, "cycle_start", ""),
    (1, "peer_request", "peer=2"),
    (2, "peer_reply", "peer=1"),
    (1, "peer_rtt", ""), (1, "peer_adopt", ""), (1, "guard", "pass"),
]

SCENARIO_3 = [
    (1, "exit", ""), (2, "exit", ""), (3, "exit", ""),
    (1, "reentry", ""), (1, "taint", ""), (1, "cycle_start", ""), (1, "peer_request", "peer=2"),
    (2, "reentry", ""), (2, "taint", ""), (2, "cycle_start", ""), (2, "peer_request", "peer=3"),
    (3, "reentry", ""), (3, "taint", ""), (3, "cycle_start", ""), (3, "peer_request", "peer=1"),
    (2, "failure_reply", "peer=1 UNTAINTING"),
    (3, "failure_reply", "peer=2 UNTAINTING"),
    (1, "failure_reply", "peer=3 UNTAINTING"),
    (1, "peer_failure", "peer=2 UNTAINTING"), (1, "peer_request", "peer=3"),
    (2, "peer_failure", "peer=3 UNTAINTING"), (2, "peer_request", "peer=1"),
    (3, "peer_failure", "peer=1 UNTAINTING"), (3, "peer_request", "peer=2"),
    (3, "failure_reply", "peer=1 UNTAINTING"),
    (1, "failure_reply", "peer=2 UNTAINTING"),
    (2, "failure_reply", "peer=3 UNTAINTING"),
    # node 1 has the lowest id and nobody is fetching: it goes external
    (1, "peer_failure", "peer=3 UNTAINTING"), (1, "external_request", ""),
    (2, "peer_failure", "peer=1 UNTAINTING"), (2, "defer", "1"),
    (3, "peer_failure", "peer=2 UNTAINTING"), (3, "defer", "1"),
    (1, "external_rtt", ""), (1, "external_adopt", ""), (1, "guard", "pass"),
    # after the back-off the others recover from peers
    (2, "peer_request", "peer=3"), (3, "peer_request", "peer=1"),
    (3, "failure_reply", "peer=2 UNTAINTING"),
    (1, "peer_reply", "peer=3"),
    (2, "peer_failure", "peer=3 UNTAINTING"), (2, "peer_request", "peer=1"),
    (3, "peer_rtt", ""), (3, "peer_adopt", ""),
    (1, "peer_reply", "peer=2"),
    (2, "peer_rtt", ""), (2, "peer_adopt", ""),
    (3, "guard", "pass"), (2, "guard", "pass"),
]


@pytest.mark.acceptance(4, "golden traces for the three scenarios")
def test_scenario_1_local_serve(record_property):
    trace = golden_run("")
    started = max(e.event_nanos for e in trace.of_kind("guard"))
    assert story(trace, started + 1) == []
    assert trace.of_kind("serve")
    for c in trace.counters.values():
        assert c["peer_reads"] == 0 and c["external_reads"] == 0
    record_property("detail", "S1 ok")


@pytest.mark.acceptance(4, "golden traces for the three scenarios")
def test_scenario_2_single_taint(record_property):
    trace = golden_run("1000000000 FORCE_EXIT node=1\n")
    assert story(trace, SECOND) == SCENARIO_2
    record_property("detail", "S2 ok")


@pytest.mark.acceptance(4, "golden traces for the three scenarios")
def test_scenario_3_all_tainted(record_property):
    trace = golden_run("1000000000 FORCE_EXIT node=*\n")
    assert story(trace, SECOND) == SCENARIO_3
    cycles = golden_run("1000000000 FORCE_EXIT node=*\n1500000000 FORCE_EXIT node=*\n"
                        "2000000000 FORCE_EXIT node=*\n", 2_500_000_000)
    fetches = [e.event_nanos // (SECOND // 2) for e in cycles.of_kind("external_adopt")]
    assert fetches == [2, 3, 4]
    record_property("detail", "S3 ok, one external fetch in each of 3 cycles")


# -- 5: rate guard ----------------------------------------------------------------

def attacked_run(ratio: str, seed: int):
    topo = quiet_topology(nodes=(1,), host=HostParams(), counter_ppm=50)
    text = f"500000000 SET_COUNTER_RATE node=1 ratio={ratio}\n"
    return run_simulation(topo, parse_schedule(text, seed), SECOND, seed)


@pytest.mark.acceptance(5, "rate guard: 0.90 always caught, 0.96 never, no false kills")
@pytest.mark.parametrize("ratio, expect", [("0.90", True), ("0.96", False)])
def test_rate_attack_runs(ratio, expect, record_property):
    detected = 0
    for seed in range(1_000):
        trace = attacked_run(ratio, seed)
        assert trace.of_kind("guard")
        detected += bool(trace.of_kind("rate_violation"))
    record_property("detail", f"{ratio}: {detected}/1000 detected")
    assert detected == (1_000 if expect else 0)


@pytest.mark.acceptance(5, "rate guard: 0.90 always caught, 0.96 never, no false kills")
def test_no_false_kills(record_property):
    evaluations = kills = 0
    for seed in range(200):
        clock = VirtualClock()
        host = SimulatedHost(clock, HostParams(), random.Random(seed))
        source = SimulatedSource(host, jitter_nanos=2_000, rng=random.Random(seed))
        calib = calibrate(source, FAST_CAL, host, clock=lambda: clock.now, sleep=host.sleep)
        target = ticks_for_nanos(2_000_000, calib.drift)
        done = 0
        while done < 5_000:
            try:
                sample = host.time_instruction_window(target)
            except WindowInterrupted:
                host.clear_exit_flag()
                continue
            kills += not judge_rate(sample, calib.drift, calib).passed
            done += 1
        evaluations += done
    record_property("detail", f"{kills} kills in {evaluations} evaluations")
    assert evaluations >= 1_000_000
    assert kills == 0


# -- 6: calibration ------------------------------------------------------------------

def blocking_calibration(seed, *, rate=Fraction(1), extra_delay=0, budget=10 * SECOND):
    clock = VirtualClock()
    host = SimulatedHost(clock, HostParams(counter_rate=rate), random.Random(seed))
    source = SimulatedSource(host, jitter_nanos=2_000, extra_delay_nanos=extra_delay,
                             rng=random.Random(seed + 7))
    params = CalibrationParams.for_limit(total_duration_nanos=budget)
    return calibrate(source, params, host, clock=lambda: clock.now, sleep=host.sleep), params


@pytest.mark.acceptance(6, "calibration: delay attack yields no valid round; drift within 0.1%")
def test_delay_attack_no_valid_rounds(record_property):
    rtt_max = CalibrationParams.for_limit().rtt_max_nanos
    failed = 0
    rng = random.Random(99)
    for seed in range(1_000):
        # uniform extra delay, split over the two legs, always above RTT_max in total
        extra = rng.randint(rtt_max + 1, 2 * rtt_max) // 2 + 1
        with pytest.raises(CalibrationFailed, match="no valid calibration round"):
            blocking_calibration(seed, extra_delay=extra)
        failed += 1
    record_property("detail", f"{failed}/1000 runs with zero valid rounds")


@pytest.mark.acceptance(6, "calibration: delay attack yields no valid round; drift within 0.1%")
def test_drift_recovery(record_property):
    worst = Fraction(0)
    for rate in (Fraction(98, 100), Fraction(1), Fraction(102, 100)):
        for seed in range(10):
            result, _ = blocking_calibration(seed, rate=rate, budget=40 * SECOND)
            assert result.rounds_succeeded >= 10
            worst = max(worst, abs(result.drift.ratio * rate - 1))
    record_property("detail", f"worst drift error {float(worst):.2e}")
    assert worst < Fraction(1, 1000)


# -- 7 and 8: scaled resource and error profiles ---------------------------------------

@pytest.mark.acceptance(7, "500 s no-attack: local:peer >= 1e4 and <= 1 external read")
def test_access_profile(tmp_path, record_property):
    result = run_experiment(ExperimentSpec("no-attack", 1, output_dir=tmp_path))
    assert result.summary["duration_nanos"] == 500 * SECOND
    parts = []
    for node, s in sorted(result.summary["nodes"].items()):
        ratio = s["local_reads"] / max(s["peer_reads"], 1)
        ext = s["external_reads"] + s["bootstrap_seeds"]
        parts.append(f"node {node} {s['local_reads']}:{s['peer_reads']} ext={ext}")
        assert ratio >= 1e4
        assert ext <= 1
    record_property("detail", ", ".join(parts))


@pytest.mark.acceptance(8, "error profile: mean |err| < 1 ms, max |err| < 30 ms")
def test_error_profile(tmp_path, record_property):
    result = run_experiment(ExperimentSpec("error-profile", 1, output_dir=tmp_path))
    parts = []
    for node, s in sorted(result.summary["nodes"].items()):
        parts.append(f"node {node} mean {s['mean_abs_error_nanos'] / 1e3:.0f} us "
                     f"max {s['max_abs_error_nanos'] / 1e3:.0f} us")
        assert s["mean_abs_error_nanos"] < 1_000_000
        assert s["max_abs_error_nanos"] < 30_000_000
    record_property("detail", ", ".join(parts))


# -- 9: wire ---------------------------------------------------------------------------

KEY = bytes(range(32))


@pytest.mark.acceptance(9, "wire: fuzz, tampering, replay, golden vectors")
def test_fuzz_million(record_property):
    rng = random.Random(2024)
    originals = [encode(m, KEY) for m in SAMPLES]
    accepted = 0
    for _ in range(1_000_000):
        base = rng.choice(originals)
        mode = rng.randrange(5)
        if mode == 0:
            data = rng.randbytes(rng.randrange(120))
        elif mode == 1:
            data = base[:rng.randrange(len(base))]
        elif mode == 2:
            b = bytearray(base)
            for _ in range(rng.randint(1, 4)):
                b[rng.randrange(len(b))] = rng.randrange(256)
            data = bytes(b)
        elif mode == 3:
            data = base + rng.randbytes(rng.randint(1, 16))
        else:
            b = bytearray(base)
            b[rng.randrange(len(b))] ^= 1 << rng.randrange(8)
            data = bytes(b)
        try:
            decode(data, KEY, None)
        except WireError:
            continue
        # only an unchanged datagram may decode
        assert data in originals
        accepted += 1
    record_property("detail", f"1e6 fuzzed, {accepted} unchanged accepted")


@pytest.mark.acceptance(9, "wire: fuzz, tampering, replay, golden vectors")
def test_all_single_bit_flips(record_property):
    flips = 0
    for msg in SAMPLES:
        data = encode(msg, KEY)
        for i in range(len(data) * 8):
            bad = bytearray(data)
            bad[i // 8] ^= 1 << (i % 8)
            with pytest.raises(WireError):
                decode(bytes(bad), KEY, None)
            flips += 1
    record_property("detail", f"{flips}/{flips} bit flips rejected")


@pytest.mark.acceptance(9, "wire: fuzz, tampering, replay, golden vectors")
def test_all_replays_rejected(record_property):
    window = ReplayWindow()
    data = [encode(replace(SAMPLES[1], seq=s, nonce=b""), KEY) for s in range(1, 5_001)]
    for d in data:
        decode(d, KEY, window)
    rejected = 0
    for d in data:
        with pytest.raises(ReplayDetected):
            decode(d, KEY, window)
        rejected += 1
    record_property("detail", f"{rejected}/{len(data)} replays rejected")


@pytest.mark.acceptance(9, "wire: fuzz, tampering, replay, golden vectors")
def test_golden_vectors_exact(testdata, record_property):
    vectors = golden_vectors(testdata)
    for v in vectors:
        expected = bytes.fromhex(v["datagram"])
        assert _independent_datagram(v) == expected
        assert encode(decode(expected, bytes.fromhex(v["key"]), None), bytes.fromhex(v["key"])) == expected
    record_property("detail", f"{len(vectors)} vectors byte-exact")


# -- 10: determinism ----------------------------------------------------------------------

@pytest.mark.acceptance(10, "same seed, byte-identical trace CSVs")
@pytest.mark.parametrize("name", sorted(SCENARIOS))
def test_rerun_identical(name, tmp_path, record_property):
    duration = min(SCENARIOS[name].duration_nanos, 60 * SECOND)
    first = run_experiment(ExperimentSpec(name, 11, duration, output_dir=tmp_path / "a"))
    second = run_experiment(ExperimentSpec(name, 11, duration, output_dir=tmp_path / "b"))
    for key, path in first.files.items():
        assert path.read_bytes() == second.files[key].read_bytes(), key
    assert json.loads(first.files["summary"].read_text())["seed"] == 11
    record_property("detail", f"{name} ok")
