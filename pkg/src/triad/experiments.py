"""Scenario library, experiment runner and plot-data export."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Any

from .config import ExperimentSpec, calibration_from, guard_from
from .sim.engine import LinkModel, Topology, run_simulation
from .sim.host import HostParams
from .sim.schedule import AdversarySchedule, load_schedule, parse_schedule
from .sim.trace import RunTrace, oracle_error, read_trace_csv

SECOND = 1_000_000_000


@dataclass(frozen=True)
class Scenario:
    name: str
    duration_nanos: int
    schedule: str | None = None
    topology: dict[str, Any] = field(default_factory=dict)
    about: str = ""


SCENARIOS: dict[str, Scenario] = {s.name: s for s in (
    Scenario("no-attack", 500 * SECOND, topology={"cache_sample_every": 50_000},
             about="trio under natural exits only"),
    Scenario("error-profile", 120 * SECOND, topology={"cache_sample_every": 5_000},
             about="35 us links, dense error sampling"),
    Scenario("freshness-attack", 60 * SECOND, "freshness-attack.sched",
             about="multi-second forced exits"),
    Scenario("delay-attack", 40 * SECOND, "delay-attack.sched",
             about="calibration requests delayed past RTT_max"),
    Scenario("rate-attack-0.90", 60 * SECOND, "rate-attack-0.90.sched",
             about="counter slowed by 10%, expect a rate violation"),
    Scenario("rate-attack-0.96", 60 * SECOND, "rate-attack-0.96.sched",
             about="counter slowed by 4%, below the guard threshold"),
    Scenario("simultaneous-exit", 40 * SECOND, "simultaneous-exit.sched",
             about="all nodes tainted at once"),
    Scenario("isolation", 40 * SECOND, "isolation.sched",
             about="one node cut off from the network"),
)}


def bundled_schedule(name: str) -> str:
    return resources.files("triad").joinpath("scenarios", name).read_text(encoding="utf-8")


# topology keys that are not plain Topology fields
_LINK_KEYS = {
    "link_one_way_nanos": ("link", "one_way_nanos"),
    "link_jitter_nanos": ("link", "jitter_nanos"),
    "external_one_way_nanos": ("external_link", "one_way_nanos"),
    "external_jitter_nanos": ("external_link", "jitter_nanos"),
}


def build_topology(overrides: dict[str, Any], calibration: dict[str, Any] | None = None,
                   guard: dict[str, Any] | None = None) -> Topology:
    topo = Topology()
    plain = {}
    for key, value in overrides.items():
        if key in _LINK_KEYS:
            attr, part = _LINK_KEYS[key]
            setattr(topo, attr, replace(getattr(topo, attr), **{part: int(value)}))
        elif key == "nodes":
            plain["nodes"] = tuple(int(n) for n in value)
        elif key == "counter_rates":
            plain["counter_rates"] = {int(k): Fraction(str(v)) for k, v in value.items()}
        elif key == "exit_model" and value in (None, "none", False):
            topo.host = HostParams(exit_model=None)
        elif key == "settings":
            plain["settings"] = dict(value)
        elif key in Topology.__dataclass_fields__ and key not in ("link", "external_link", "host"):
            plain[key] = value
        else:
            raise ValueError(f"unknown topology setting {key!r}")
    for key, value in plain.items():
        setattr(topo, key, value)
    if calibration:
        topo.settings = {**topo.settings, "calibration": calibration_from(calibration)}
    if guard:
        topo.settings = {**topo.settings, "guard": guard_from(guard)}
    topo.__post_init__()
    return topo


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    trace: RunTrace
    summary: dict[str, Any]
    files: dict[str, Path]


def resolve(spec: ExperimentSpec) -> tuple[Topology, AdversarySchedule, int]:
    scenario = SCENARIOS.get(spec.scenario)
    if scenario is None and spec.schedule is None:
        known = ", ".join(sorted(SCENARIOS))
        raise ValueError(f"unknown scenario {spec.scenario!r} (known: {known}); "
                         f"a custom scenario needs a schedule file")
    if spec.schedule is not None:
        schedule = load_schedule(spec.schedule, spec.seed)
    elif scenario.schedule is not None:
        schedule = parse_schedule(bundled_schedule(scenario.schedule), spec.seed)
    else:
        schedule = AdversarySchedule(spec.seed)
    overrides = dict(scenario.topology) if scenario else {}
    overrides.update(spec.topology)
    topology = build_topology(overrides, spec.calibration)
    duration = spec.duration_nanos or (scenario.duration_nanos if scenario else 60 * SECOND)
    return topology, schedule, duration


def summarize(trace: RunTrace, spec: ExperimentSpec, duration: int) -> dict[str, Any]:
    errors = oracle_error(trace)
    nodes: dict[str, Any] = {}
    for node, counters in sorted(trace.counters.items()):
        s = errors.get(node)
        terminations: dict[str, int] = {}
        for e in trace.of_kind("rate_violation", "frequency_violation", node=node):
            terminations[e.kind] = terminations.get(e.kind, 0) + 1
        nodes[str(node)] = {
            "serves": s.serves if s else 0,
            "mean_error_nanos": round(s.mean_error_nanos, 1) if s else None,
            "mean_abs_error_nanos": round(s.mean_abs_error_nanos, 1) if s else None,
            "max_abs_error_nanos": s.max_abs_error_nanos if s else None,
            "bound_violations": s.bound_violations if s else 0,
            "monotonic_violations": s.monotonic_violations if s else 0,
            "local_reads": counters["local_reads"],
            "peer_reads": counters["peer_reads"],
            "external_reads": counters["external_reads"],
            "bootstrap_seeds": counters["bootstrap_seeds"],
            "exits": counters["exits"],
            "restarts": counters["restarts"],
            "calibration_failures": len(trace.of_kind("calibration_failed", node=node)),
            "terminations": terminations,
        }
    return {
        "scenario": spec.scenario,
        "seed": spec.seed,
        "duration_nanos": duration,
        "nodes": nodes,
    }


def run_experiment(spec: ExperimentSpec) -> ExperimentResult:
    topology, schedule, duration = resolve(spec)
    trace = run_simulation(topology, schedule, duration, spec.seed)
    out = Path(spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"trace": out / "trace.csv", "summary": out / "summary.json"}
    trace.write_csv(files["trace"])
    summary = summarize(trace, spec, duration)
    files["summary"].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for kind in EXPORT_KINDS:
        path = out / f"{kind}.csv"
        path.write_text(export_plotdata(trace, kind), encoding="utf-8")
        files[kind] = path
    return ExperimentResult(spec, trace, summary, files)


# -- plot data ---------------------------------------------------------------

EXPORT_COLUMNS = {
    "error": ("event_nanos", "node", "phase", "oracle_error_nanos", "epsilon_nanos"),
    "access": ("node", "local_reads", "peer_reads", "external_reads", "bootstrap_seeds"),
    "epoch": ("event_nanos", "node", "epoch_length_nanos"),
    "rtt": ("event_nanos", "node", "source", "rtt_nanos"),
}
EXPORT_KINDS = tuple(EXPORT_COLUMNS)

_ERROR_PHASE = {"calibration_estimate": "calibration", "serve": "serve", "cache": "cache"}
_ACCESS = ("local_reads", "peer_reads", "external_reads", "bootstrap_seeds")


def _rows(trace: RunTrace, kind: str):
    if kind == "error":
        for e in trace.events:
            phase = _ERROR_PHASE.get(e.kind)
            if phase is not None and e.oracle_error_nanos is not None:
                yield (e.event_nanos, e.node, phase, e.oracle_error_nanos,
                       "" if e.epsilon_nanos is None else e.epsilon_nanos)
    elif kind == "access":
        totals: dict[int, dict[str, int]] = {}
        for e in trace.of_kind(*_ACCESS):
            totals.setdefault(e.node, {})[e.kind] = e.value_nanos
        for node in sorted(totals):
            yield (node, *(totals[node].get(k, 0) for k in _ACCESS))
    elif kind == "epoch":
        for e in trace.of_kind("exit"):
            yield e.event_nanos, e.node, e.value_nanos
    elif kind == "rtt":
        for e in trace.of_kind("peer_rtt", "external_rtt"):
            yield e.event_nanos, e.node, e.kind.split("_")[0], e.value_nanos
    else:
        raise ValueError(f"unknown export kind {kind!r} (choose from {', '.join(EXPORT_KINDS)})")


def export_plotdata(trace: RunTrace, kind: str) -> str:
    """CSV text for one figure style; an empty trace gives just the header."""
    if kind not in EXPORT_COLUMNS:
        raise ValueError(f"unknown export kind {kind!r} (choose from {', '.join(EXPORT_KINDS)})")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(EXPORT_COLUMNS[kind])
    writer.writerows(_rows(trace, kind))
    return buf.getvalue()


def export_trace_file(path: str | Path, kind: str) -> str:
    return export_plotdata(read_trace_csv(path), kind)
