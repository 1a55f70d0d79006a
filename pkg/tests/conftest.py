from __future__ import annotations

from pathlib import Path

import pytest

from triad.calibration import CalibrationParams
from triad.guard import GuardConfig
from triad.sim.engine import LinkModel, Topology
from triad.sim.host import HostParams

ROOT = Path(__file__).resolve().parent.parent
TESTDATA = ROOT / "testdata"

# short calibration so scripted scenarios start serving after ~0.4 s
FAST_CAL = CalibrationParams(40_000_000, 7_500_000, 50_000_000, total_duration_nanos=300_000_000)


def quiet_topology(nodes=(1, 2, 3), *, clients=None, guard_period=None, **kw) -> Topology:
    """No natural exits, no jitter, no rate spread: only scripted events happen."""
    settings = {"calibration": FAST_CAL, "guard": GuardConfig(periodic_nanos=guard_period)}
    settings.update(kw.pop("settings", {}))
    return Topology(
        nodes=tuple(nodes),
        host=kw.pop("host", HostParams(exit_model=None)),
        link=kw.pop("link", LinkModel(35_000, 0)),
        external_link=kw.pop("external_link", LinkModel(1_000_000, 0)),
        counter_ppm=kw.pop("counter_ppm", 0),
        client_interval_nanos=clients,
        settings=settings,
        **kw,
    )


def stress_topology(**kw) -> Topology:
    """Fast calibration, natural exits and busy clients: many serves per virtual second."""
    return Topology(
        external_link=LinkModel(1_000_000, 5_000),
        settings={"calibration": FAST_CAL},
        client_interval_nanos=200_000,
        restart_delay_nanos=20_000_000,
        **kw,
    )


@pytest.fixture
def testdata() -> Path:
    return TESTDATA


# -- acceptance report -------------------------------------------------------

_ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when != "call":
        return
    number, title = marker.args
    detail = "; ".join(str(v) for k, v in report.user_properties if k == "detail")
    passed = _ACCEPTANCE.get(number, (title, True, ""))[1] and report.passed
    previous = _ACCEPTANCE.get(number, (title, True, ""))[2]
    _ACCEPTANCE[number] = (title, passed, "; ".join(x for x in (previous, detail) if x))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, passed, detail = _ACCEPTANCE[number]
        line = f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {title}"
        terminalreporter.write_line(f"{line}: {detail}" if detail else line)
