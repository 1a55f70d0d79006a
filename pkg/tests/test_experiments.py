from __future__ import annotations

import csv
import json

import pytest

from triad.config import ExperimentSpec
from triad.experiments import (
    EXPORT_COLUMNS,
    SCENARIOS,
    build_topology,
    bundled_schedule,
    export_plotdata,
    export_trace_file,
    run_experiment,
)
from triad.sim.schedule import parse_schedule
from triad.sim.trace import CSV_HEADER, RunTrace

SECOND = 1_000_000_000


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def no_attack(tmp_path_factory):
    out = tmp_path_factory.mktemp("na")
    return run_experiment(ExperimentSpec("no-attack", 1, 60 * SECOND, output_dir=out))


def test_bundled_schedules_parse():
    for s in SCENARIOS.values():
        if s.schedule:
            assert len(parse_schedule(bundled_schedule(s.schedule))) > 0


def test_outputs_written(no_attack):
    files = no_attack.files
    assert set(files) == {"trace", "summary", *EXPORT_COLUMNS}
    assert files["trace"].read_text().splitlines()[0] == ",".join(CSV_HEADER)
    for kind, cols in EXPORT_COLUMNS.items():
        assert files[kind].read_text().splitlines()[0] == ",".join(cols)
    summary = json.loads(files["summary"].read_text())
    assert summary == no_attack.summary
    assert summary["scenario"] == "no-attack" and summary["duration_nanos"] == 60 * SECOND


def test_no_attack_summary(no_attack):
    for node in ("1", "2", "3"):
        s = no_attack.summary["nodes"][node]
        assert s["bound_violations"] == 0 and s["monotonic_violations"] == 0
        assert s["external_reads"] == 0 and s["bootstrap_seeds"] == 1
        assert s["local_reads"] > 1_000 * s["peer_reads"]
        assert s["max_abs_error_nanos"] < 1_000_000


def test_epoch_export_has_the_long_mode(no_attack):
    lengths = [int(r["epoch_length_nanos"]) for r in rows(no_attack.files["epoch"])]
    assert len(lengths) > 200
    top = sum(1 for v in lengths if v >= 1_400_000_000) / len(lengths)
    assert 0.2 < top < 0.4
    assert max(lengths) <= 1_580_000_000


def test_error_export_phases(no_attack):
    phases = {r["phase"] for r in rows(no_attack.files["error"])}
    assert phases == {"calibration", "serve", "cache"}


def test_access_export_matches_counters(no_attack):
    for r in rows(no_attack.files["access"]):
        c = no_attack.trace.counters[int(r["node"])]
        assert int(r["local_reads"]) == c["local_reads"]
        assert int(r["peer_reads"]) == c["peer_reads"]


def test_rtt_export(no_attack):
    sources = {r["source"] for r in rows(no_attack.files["rtt"])}
    assert sources == {"peer", "external"}


def test_export_from_trace_file_matches(no_attack):
    for kind in EXPORT_COLUMNS:
        assert export_trace_file(no_attack.files["trace"], kind) == no_attack.files[kind].read_text()


def test_empty_trace_exports_header_only():
    for kind, cols in EXPORT_COLUMNS.items():
        assert export_plotdata(RunTrace(), kind) == ",".join(cols) + "\n"
    with pytest.raises(ValueError):
        export_plotdata(RunTrace(), "latency")


def test_rate_attack_terminates_and_restarts(tmp_path):
    r = run_experiment(ExperimentSpec("rate-attack-0.90", 1, 25 * SECOND, output_dir=tmp_path))
    n1 = r.summary["nodes"]["1"]
    assert n1["terminations"] == {"rate_violation": 1}
    assert n1["restarts"] == 1 and n1["bound_violations"] == 0


def test_delay_attack_blocks_calibration(tmp_path):
    r = run_experiment(ExperimentSpec("delay-attack", 1, 15 * SECOND, output_dir=tmp_path))
    n1 = r.summary["nodes"]["1"]
    assert n1["calibration_failures"] >= 1 and n1["serves"] == 0
    assert r.summary["nodes"]["2"]["serves"] > 0


def test_custom_scenario_needs_schedule(tmp_path):
    with pytest.raises(ValueError, match="schedule"):
        run_experiment(ExperimentSpec("mine", output_dir=tmp_path))
    sched = tmp_path / "s.sched"
    sched.write_text("14000000000 FORCE_EXIT node=*\n")
    r = run_experiment(ExperimentSpec("mine", 2, 16 * SECOND, sched, tmp_path / "out",
                                      {"exit_model": "none", "counter_ppm": 0}))
    assert sum(n["external_reads"] for n in r.summary["nodes"].values()) == 1


def test_build_topology_overrides():
    topo = build_topology({"link_one_way_nanos": 10_000, "external_jitter_nanos": 0, "nodes": [4, 5],
                           "counter_rates": {"4": "1.001"}, "exit_model": "none"},
                          calibration={"l_nanos": 100_000_000}, guard={"rate_threshold": "0.2"})
    assert topo.link.one_way_nanos == 10_000 and topo.external_link.jitter_nanos == 0
    assert topo.nodes == (4, 5) and topo.host.exit_model is None
    assert topo.settings["calibration"].l_nanos == 100_000_000
    with pytest.raises(ValueError):
        build_topology({"warp": 9})


def test_rerun_is_byte_identical(tmp_path):
    a = run_experiment(ExperimentSpec("freshness-attack", 7, 10 * SECOND, output_dir=tmp_path / "a"))
    b = run_experiment(ExperimentSpec("freshness-attack", 7, 10 * SECOND, output_dir=tmp_path / "b"))
    for key in a.files:
        assert a.files[key].read_bytes() == b.files[key].read_bytes()
