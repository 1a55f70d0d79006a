"""Node and experiment configuration.

Both are TOML files. Any value can be overridden from the environment with
``TRIAD_<SECTION>_<KEY>`` (or ``TRIAD_<KEY>`` for top-level keys), e.g.
``TRIAD_NODE_ID=2`` or ``TRIAD_CALIBRATION_PP_NANOS=400000000``. Override
values are parsed as TOML scalars, falling back to plain strings.
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .calibration import CalibrationParams
from .core import ResolutionUnit
from .guard import GuardConfig
from .wire import KEY_LEN

ENV_PREFIX = "TRIAD_"


class ConfigError(ValueError):
    pass


def _scalar(text: str) -> Any:
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_env_overrides(data: dict, environ: Mapping[str, str] | None = None) -> dict:
    """Overlay ``TRIAD_*`` variables onto a parsed config (returns a copy)."""
    environ = os.environ if environ is None else environ
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in data.items()}
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower()
        if not key:
            continue
        section, _, rest = key.partition("_")
        if rest and isinstance(out.get(section), dict):
            out[section][rest] = _scalar(raw)
        elif rest and section in _SECTIONS:
            out[section] = {rest: _scalar(raw)}
        else:
            out[key] = _scalar(raw)
    return out


_SECTIONS = {"peers", "external", "calibration", "guard", "timing", "topology", "clients"}


def load_toml(path: str | Path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = str(text).rpartition(":")
    if not sep or not host:
        raise ConfigError(f"expected host:port, got {text!r}")
    try:
        return host, int(port)
    except ValueError:
        raise ConfigError(f"bad port in {text!r}") from None


def load_keys(path: str | Path) -> dict[int, bytes]:
    """Key file: a ``[keys]`` table mapping party id to a 64-hex-digit key."""
    data = load_toml(path)
    table = data.get("keys")
    if not isinstance(table, dict) or not table:
        raise ConfigError(f"{path}: missing [keys] table")
    keys: dict[int, bytes] = {}
    for ident, hexkey in table.items():
        try:
            key = bytes.fromhex(hexkey)
            node = int(ident)
        except (ValueError, TypeError):
            raise ConfigError(f"{path}: bad key entry {ident!r}") from None
        if len(key) != KEY_LEN:
            raise ConfigError(f"{path}: key for {ident} must be {KEY_LEN} bytes")
        keys[node] = key
    return keys


def calibration_from(table: Mapping[str, Any]) -> CalibrationParams:
    t = dict(table)
    if "agreement" in t:
        t["agreement"] = Fraction(str(t["agreement"]))
    if "pp_nanos" in t or "rtt_max_nanos" in t:
        try:
            return CalibrationParams(**t)
        except TypeError as exc:
            raise ConfigError(f"calibration: {exc}") from None
    l_nanos = t.pop("l_nanos", None)
    try:
        return CalibrationParams.for_limit(l_nanos, **t) if l_nanos else CalibrationParams.for_limit(**t)
    except TypeError as exc:
        raise ConfigError(f"calibration: {exc}") from None


def guard_from(table: Mapping[str, Any]) -> GuardConfig:
    t = dict(table)
    for name in ("rate_threshold", "frequency_threshold"):
        if name in t:
            t[name] = Fraction(str(t[name]))
    if isinstance(t.get("memory_check"), str):
        t["memory_check"] = t["memory_check"].lower() in ("on", "true", "1", "yes")
    try:
        return GuardConfig(**t)
    except TypeError as exc:
        raise ConfigError(f"guard: {exc}") from None


@dataclass
class NodeConfig:
    node_id: int
    listen: tuple[str, int]
    peers: dict[int, tuple[str, int]]
    external: tuple[str, int]
    key_file: Path
    keys: dict[int, bytes] = field(repr=False, default_factory=dict)
    host_backend: str = "real"
    calibration: CalibrationParams = field(default_factory=CalibrationParams.for_limit)
    guard: GuardConfig = field(default_factory=lambda: GuardConfig(memory_check=False))
    resolution: ResolutionUnit = field(default_factory=ResolutionUnit)
    timing: dict[str, int] = field(default_factory=dict)
    trace_path: Path | None = None
    max_unavailable: int = 3

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any], base: Path = Path(".")) -> NodeConfig:
        try:
            node_id = int(data["node_id"])
            listen = parse_address(data["listen"])
            external = parse_address(data["external"]["address"])
            key_file = base / data["key_file"]
        except KeyError as exc:
            raise ConfigError(f"missing required setting {exc}") from None
        if node_id <= 0:
            raise ConfigError("node_id must be a positive integer")
        peers = {int(k): parse_address(v) for k, v in data.get("peers", {}).items()}
        if node_id in peers:
            raise ConfigError("a node cannot list itself as a peer")
        if not key_file.is_file():
            raise ConfigError(f"key file not readable: {key_file}")
        keys = load_keys(key_file)
        missing = [p for p in [*peers, 0] if p not in keys]
        if missing:
            raise ConfigError(f"key file lacks keys for {missing}")
        backend = data.get("host_backend", "real")
        if backend != "real":
            raise ConfigError("the daemon only supports host_backend = 'real'")
        trace = data.get("trace_path")
        return cls(
            node_id=node_id,
            listen=listen,
            peers=peers,
            external=external,
            key_file=key_file,
            keys=keys,
            host_backend=backend,
            calibration=calibration_from(data.get("calibration", {})),
            guard=guard_from(data.get("guard", {})),
            resolution=ResolutionUnit(int(data.get("resolution_nanos", 1))),
            timing={k: int(v) for k, v in data.get("timing", {}).items()},
            trace_path=None if trace is None else base / trace,
            max_unavailable=int(data.get("max_unavailable", 3)),
        )


def load_node_config(path: str | Path, environ: Mapping[str, str] | None = None) -> NodeConfig:
    path = Path(path)
    data = apply_env_overrides(load_toml(path), environ)
    return NodeConfig.from_mapping(data, path.parent)


@dataclass
class ExperimentSpec:
    scenario: str
    seed: int = 1
    duration_nanos: int | None = None
    schedule: Path | None = None
    output_dir: Path = Path("triad-out")
    topology: dict[str, Any] = field(default_factory=dict)
    calibration: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any], base: Path = Path(".")) -> ExperimentSpec:
        if "scenario" not in data:
            raise ConfigError("experiment spec needs a scenario name")
        duration = data.get("duration_nanos")
        if duration is None and "duration_s" in data:
            duration = int(Fraction(str(data["duration_s"])) * 1_000_000_000)
        schedule = data.get("schedule")
        if schedule is not None:
            schedule = base / schedule
            if not schedule.is_file():
                raise ConfigError(f"schedule file not found: {schedule}")
        return cls(
            scenario=str(data["scenario"]),
            seed=int(data.get("seed", 1)),
            duration_nanos=None if duration is None else int(duration),
            schedule=schedule,
            output_dir=base / data.get("output_dir", "triad-out"),
            topology=dict(data.get("topology", {})),
            calibration=dict(data.get("calibration", {})),
        )


def load_experiment_spec(path: str | Path, environ: Mapping[str, str] | None = None) -> ExperimentSpec:
    path = Path(path)
    data = apply_env_overrides(load_toml(path), environ)
    return ExperimentSpec.from_mapping(data, path.parent)
