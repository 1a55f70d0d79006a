"""Adversary schedules: scripted attacks on hosts and on the network.

Text format, one event per line, sorted by time::

    # comment
    1500000000 FORCE_EXIT node=2 duration=20000
    2000000000 SET_COUNTER_RATE node=1 ratio=0.96
    2500000000 DELAY_MESSAGE src=1 dst=2 type=TS_REQUEST delay=300000 for=1000000000
    3000000000 ISOLATE_NODE node=3 duration=500000000

Node fields take an id, ``ext`` for the external source, or ``*``.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field, fields
from fractions import Fraction

from ..wire import EXTERNAL_ID, MsgType


class ScheduleInvalid(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class MatchPredicate:
    """Selects messages by endpoints and type; ``index`` picks the k-th match (0-based)."""

    src: int | None = None
    dst: int | None = None
    msg_type: MsgType | None = None
    index: int | None = None

    def matches(self, src: int, dst: int, msg_type: int) -> bool:
        return ((self.src is None or self.src == src)
                and (self.dst is None or self.dst == dst)
                and (self.msg_type is None or self.msg_type == msg_type))


@dataclass(frozen=True)
class ForceExit:
    node: int | None
    duration: int = 10_000


@dataclass(frozen=True)
class SetCounterRate:
    node: int | None
    ratio: Fraction
    duration: int = 10_000


@dataclass(frozen=True)
class OverwriteCounter:
    node: int | None
    ticks: int
    duration: int = 10_000


@dataclass(frozen=True)
class SetCpuFrequencyScale:
    node: int | None
    ratio: Fraction
    duration: int = 10_000


@dataclass(frozen=True)
class DelayMessage:
    match: MatchPredicate
    delay: int
    for_nanos: int | None = None


@dataclass(frozen=True)
class DropMessage:
    match: MatchPredicate
    for_nanos: int | None = None


@dataclass(frozen=True)
class ReplayMessage:
    """Re-inject a copy of matching messages ``after`` ns later."""

    match: MatchPredicate
    after: int = 1_000_000
    for_nanos: int | None = None


@dataclass(frozen=True)
class IsolateNode:
    node: int
    duration: int


Action = (ForceExit | SetCounterRate | OverwriteCounter | SetCpuFrequencyScale
          | DelayMessage | DropMessage | ReplayMessage | IsolateNode)
HOST_ACTIONS = (ForceExit, SetCounterRate, OverwriteCounter, SetCpuFrequencyScale)
NETWORK_ACTIONS = (DelayMessage, DropMessage, ReplayMessage)

_NAMES = {
    "FORCE_EXIT": ForceExit,
    "SET_COUNTER_RATE": SetCounterRate,
    "OVERWRITE_COUNTER": OverwriteCounter,
    "SET_CPU_FREQUENCY_SCALE": SetCpuFrequencyScale,
    "DELAY_MESSAGE": DelayMessage,
    "DROP_MESSAGE": DropMessage,
    "REPLAY_MESSAGE": ReplayMessage,
    "ISOLATE_NODE": IsolateNode,
}
_KEYWORD = {cls: name for name, cls in _NAMES.items()}
# text keys that differ from field names
_ALIASES = {"for": "for_nanos", "type": "msg_type"}
_MATCH_KEYS = {"src", "dst", "type", "index"}


@dataclass(frozen=True)
class ScheduledEvent:
    at: int
    action: Action


@dataclass
class AdversarySchedule:
    seed: int = 0
    events: list[ScheduledEvent] = field(default_factory=list)

    def __post_init__(self) -> None:
        for i, (a, b) in enumerate(zip(self.events, self.events[1:])):
            if b.at < a.at:
                raise ScheduleInvalid(f"event {i + 1} at {b.at} precedes event {i} at {a.at}")
        for ev in self.events:
            if ev.at < 0:
                raise ScheduleInvalid(f"negative event time {ev.at}")

    def __len__(self) -> int:
        return len(self.events)


def _node(text: str) -> int | None:
    if text == "*":
        return None
    if text == "ext":
        return EXTERNAL_ID
    value = int(text)
    if value < 0:
        raise ValueError("node ids are non-negative")
    return value


def _nonneg(text: str) -> int:
    value = int(text)
    if value < 0:
        raise ValueError(f"{text} is negative")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value <= 0:
        raise ValueError(f"{text} is not positive")
    return value


def _ratio(text: str) -> Fraction:
    value = Fraction(text)
    if value <= 0:
        raise ValueError("ratio must be positive")
    return value


def _msg_type(text: str) -> MsgType | None:
    return None if text == "*" else MsgType[text.upper()]


_CONVERT = {
    "node": _node, "src": _node, "dst": _node, "msg_type": _msg_type,
    "index": _nonneg, "duration": _positive, "delay": _positive, "after": _positive,
    "for_nanos": _positive, "ratio": _ratio, "ticks": _nonneg,
}


def _parse_line(text: str, lineno: int) -> ScheduledEvent:
    parts = text.split()
    if len(parts) < 2:
        raise ScheduleInvalid("expected '<virtual_nanos> <ACTION> key=value ...'", lineno)
    try:
        at = int(parts[0])
    except ValueError:
        raise ScheduleInvalid(f"bad time {parts[0]!r}", lineno) from None
    if at < 0:
        raise ScheduleInvalid("negative event time", lineno)
    cls = _NAMES.get(parts[1].upper())
    if cls is None:
        raise ScheduleInvalid(f"unknown action {parts[1]!r}", lineno)
    args: dict[str, str] = {}
    for item in parts[2:]:
        key, sep, value = item.partition("=")
        if not sep or not value:
            raise ScheduleInvalid(f"expected key=value, got {item!r}", lineno)
        if key in args:
            raise ScheduleInvalid(f"duplicate key {key!r}", lineno)
        args[key] = value
    kwargs: dict[str, object] = {}
    match: dict[str, object] = {}
    names = {f.name for f in fields(cls)}
    try:
        for key, raw in args.items():
            name = _ALIASES.get(key, key)
            if key in _MATCH_KEYS and "match" in names:
                match[name] = _CONVERT[name](raw)
            elif name in names and name != "match":
                kwargs[name] = _CONVERT[name](raw)
            else:
                raise ScheduleInvalid(f"{parts[1]} does not take {key!r}", lineno)
        if "match" in names:
            kwargs["match"] = MatchPredicate(**match)
        action = cls(**kwargs)
    except ScheduleInvalid:
        raise
    except (ValueError, KeyError, TypeError, ZeroDivisionError) as exc:
        raise ScheduleInvalid(f"{parts[1]}: {exc}", lineno) from None
    if isinstance(action, IsolateNode) and action.node is None:
        raise ScheduleInvalid("ISOLATE_NODE needs a concrete node", lineno)
    return ScheduledEvent(at, action)


def parse_schedule(text: str, seed: int = 0) -> AdversarySchedule:
    events: list[ScheduledEvent] = []
    last_at = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        ev = _parse_line(line, lineno)
        if ev.at < last_at:
            raise ScheduleInvalid(f"events out of order ({ev.at} after {last_at})", lineno)
        last_at = ev.at
        events.append(ev)
    return AdversarySchedule(seed, events)


def load_schedule(path, seed: int = 0) -> AdversarySchedule:
    with open(path, encoding="utf-8") as fh:
        return parse_schedule(fh.read(), seed)


def _fmt_node(value: int | None) -> str:
    if value is None:
        return "*"
    return "ext" if value == EXTERNAL_ID else str(value)


def _fmt_value(name: str, value) -> str:
    if name in ("node", "src", "dst"):
        return _fmt_node(value)
    if name == "msg_type":
        return value.name
    if isinstance(value, Fraction):
        return str(value)
    return str(value)


def format_event(ev: ScheduledEvent) -> str:
    action = ev.action
    parts = [str(ev.at), _KEYWORD[type(action)]]
    inverse = {v: k for k, v in _ALIASES.items()}
    for f in fields(action):
        value = getattr(action, f.name)
        if f.name == "match":
            for mf in fields(value):
                mv = getattr(value, mf.name)
                if mv is not None:
                    parts.append(f"{inverse.get(mf.name, mf.name)}={_fmt_value(mf.name, mv)}")
            continue
        if value is None and f.name != "node":
            continue
        parts.append(f"{inverse.get(f.name, f.name)}={_fmt_value(f.name, value)}")
    return " ".join(parts)


def format_schedule(schedule: AdversarySchedule) -> str:
    return "".join(format_event(ev) + "\n" for ev in schedule.events)


def random_schedule(seed: int, nodes: list[int], start: int, end: int, *,
                    events: int = 40, allow_kill: bool = True) -> AdversarySchedule:
    """A mixed attack schedule between ``start`` and ``end``.

    Network attacks only touch peer and external timestamp traffic; the
    calibration exchange is attacked separately (see the delay-attack
    scenario), since an in-gate delay there skews the drift estimate by
    design.
    """
    rng = random.Random(seed)
    ts_types = [MsgType.TS_REQUEST, MsgType.TS_REPLY, MsgType.FAILURE_REPLY,
                MsgType.EXT_REQUEST, MsgType.EXT_REPLY]
    out: list[ScheduledEvent] = []
    for _ in range(events):
        at = rng.randrange(start, end)
        node = rng.choice(nodes)
        roll = rng.random()
        if roll < 0.30:
            action = ForceExit(node, rng.randint(1_000, 50_000_000))
        elif roll < 0.38:
            action = ForceExit(None, rng.randint(1_000, 5_000_000))
        elif roll < 0.50:
            pct = rng.randint(-45, 45)
            action = SetCounterRate(node, Fraction(1000 + pct, 1000), rng.randint(1_000, 100_000))
        elif roll < 0.55 and allow_kill:
            action = SetCounterRate(node, rng.choice([Fraction(9, 10), Fraction(11, 10)]))
        elif roll < 0.60:
            action = OverwriteCounter(node, rng.randrange(1 << 40), rng.randint(1_000, 100_000))
        elif roll < 0.72:
            pred = MatchPredicate(rng.choice(nodes + [None]), rng.choice(nodes + [None]),
                                  rng.choice(ts_types))
            action = DelayMessage(pred, rng.randint(1_000, 2_000_000), rng.randint(1_000_000, 500_000_000))
        elif roll < 0.82:
            pred = MatchPredicate(rng.choice(nodes + [None]), None, rng.choice(ts_types))
            action = DropMessage(pred, rng.randint(1_000_000, 200_000_000))
        elif roll < 0.92:
            pred = MatchPredicate(None, None, rng.choice(ts_types))
            action = ReplayMessage(pred, rng.randint(1_000, 5_000_000), rng.randint(1_000_000, 200_000_000))
        else:
            action = IsolateNode(node, rng.randint(1_000_000, 300_000_000))
        out.append(ScheduledEvent(at, action))
    out.sort(key=lambda ev: ev.at)
    return AdversarySchedule(seed, out)
