"""The discrete-event loop driving nodes, hosts, links and the adversary.

Events are ordered by ``(virtual time, insertion order)``, so a run is a
pure function of topology, schedule, duration and seed. A node only runs
while its host is inside the enclave and no timing window is in progress;
anything addressed to it meanwhile waits in a per-node backlog.

The refresher is not an event: between two events touching a node, the
refresh steps it would have made on its fixed grid are replayed in bulk by
the sweep kernel.
"""

from __future__ import annotations

import hashlib
import heapq
import random
from collections import deque
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from typing import Any, Callable

from .. import kernels
from ..host import WindowInterrupted
from ..node import NodeSettings, TriadNode
from ..wire import EXTERNAL_ID, MsgType, NonceCounter, ReplayWindow, WireError, WireMessage, decode, encode, peek_header
from .host import HostParams, SimulatedHost, VirtualClock
from .schedule import (
    AdversarySchedule,
    DelayMessage,
    DropMessage,
    ForceExit,
    IsolateNode,
    OverwriteCounter,
    ReplayMessage,
    SetCounterRate,
    SetCpuFrequencyScale,
)
from .trace import OracleClock, RunTrace, TraceEvent

DEFAULT_EPOCH_OFFSET = 1_700_000_000 * 1_000_000_000


@dataclass(frozen=True)
class LinkModel:
    one_way_nanos: int = 35_000
    jitter_nanos: int = 2_000

    def sample(self, rng: random.Random) -> int:
        j = rng.randint(-self.jitter_nanos, self.jitter_nanos) if self.jitter_nanos else 0
        return max(self.one_way_nanos + j, 1)


@dataclass
class Topology:
    nodes: tuple[int, ...] = (1, 2, 3)
    link: LinkModel = field(default_factory=LinkModel)
    external_link: LinkModel = field(default_factory=lambda: LinkModel(71_000_000, 5_000))
    host: HostParams = field(default_factory=HostParams)
    # per-node counter rates spread uniformly within +-counter_ppm
    counter_ppm: int = 50
    counter_rates: dict[int, Fraction] | None = None
    settings: dict[str, Any] = field(default_factory=dict)
    client_interval_nanos: int | None = 10_000_000
    epoch_offset_nanos: int = DEFAULT_EPOCH_OFFSET
    cache_sample_every: int = 0
    restart_delay_nanos: int = 50_000_000
    restart_on_failure: bool = True
    start_stagger_nanos: int = 1_000_000

    def __post_init__(self) -> None:
        if not self.nodes:
            raise ValueError("topology needs at least one node")
        if EXTERNAL_ID in self.nodes or len(set(self.nodes)) != len(self.nodes):
            raise ValueError("node ids must be unique and non-zero")


def link_key(a: int, b: int, seed: int) -> bytes:
    """Deterministic pre-shared key for the link between ``a`` and ``b``."""
    lo, hi = sorted((a, b))
    return hashlib.sha256(f"triad-link/{seed}/{lo}/{hi}".encode()).digest()


class Timer:
    __slots__ = ("cancelled",)

    def __init__(self) -> None:
        self.cancelled = False


@dataclass
class _Rule:
    action: Any
    expires: int | None
    seen: int = 0


class _Runtime:
    """One node's slice of the world; implements the node's environment."""

    def __init__(self, sim: Simulator, node_id: int, host: SimulatedHost):
        self.sim = sim
        self.id = node_id
        self.host = host
        self.node: TriadNode | None = None
        self.backlog: deque = deque()
        self.busy = False
        self.swept_to = 0
        self.exit_token = 0
        self.sweep_steps = 0
        self.cache_err_sum = 0
        self.cache_abs_sum = 0
        self.cache_max_abs = 0

    # NodeEnv
    def send(self, dst: int, datagram: bytes) -> None:
        self.sim._transmit(self.id, dst, datagram)

    def call_later(self, delay_nanos: int, fn: Callable, *args) -> Timer:
        timer = Timer()
        self.sim._at(self.sim.clock.now + max(delay_nanos, 0), self.sim._deliver, self, fn, args, timer)
        return timer

    def cancel(self, handle: Timer) -> None:
        handle.cancelled = True

    def start_window(self, kind: str, target_ticks: int, callback: Callable) -> None:
        self.sim._start_window(self, kind, target_ticks, callback)

    def respond(self, client: Any, result) -> None:
        sim = self.sim
        if result is None:
            sim._record(self.id, "unavailable_reply")
            return
        err = result.nanos - sim.oracle.now()
        sim._record(self.id, "serve", result.nanos, result.error_bound_nanos, err)

    def record(self, kind: str, value: int | None = None, epsilon: int | None = None,
               detail: str = "") -> None:
        err = None
        if kind == "calibration_estimate":
            err = value - self.sim.oracle.now()
        self.sim._record(self.id, kind, value, epsilon, err, detail)

    def lifecycle(self, event: str) -> None:
        sim = self.sim
        if event == "serving":
            return
        if event in ("rate_violation", "frequency_violation"):
            sim._record(self.id, event)
        if event in ("rate_violation", "frequency_violation") or (
                event == "bootstrap_failed" and sim.topology.restart_on_failure):
            sim._at(sim.clock.now + sim.topology.restart_delay_nanos, sim._deliver,
                    self, self.node.restart, (), None)


class _ExternalResponder:
    """The trusted external source: exact time, always up."""

    def __init__(self, sim: Simulator, keys: dict[int, bytes]):
        self.sim = sim
        self.keys = keys
        self.window = ReplayWindow()
        self.nonces = NonceCounter(EXTERNAL_ID)
        self.requests = 0

    def handle(self, data: bytes) -> None:
        try:
            msg = decode(data, self.keys, self.window)
        except WireError:
            return
        if msg.msg_type is MsgType.EXT_REQUEST:
            self.requests += 1
            self._reply(msg.sender_id, WireMessage(
                MsgType.EXT_REPLY, EXTERNAL_ID, self.nonces.next(), echo_nonce=msg.nonce,
                nanos=self.sim.oracle.now(), epsilon_nanos=0))
        elif msg.msg_type is MsgType.CAL_REQUEST:
            self.sim._at(self.sim.clock.now + msg.pp_nanos, self._cal_reply, msg)

    def _cal_reply(self, msg: WireMessage) -> None:
        self._reply(msg.sender_id, WireMessage(
            MsgType.CAL_REPLY, EXTERNAL_ID, self.nonces.next(), echo_nonce=msg.nonce,
            elapsed_nanos=msg.pp_nanos, nanos=self.sim.oracle.now()))

    def _reply(self, dst: int, msg: WireMessage) -> None:
        self.sim._transmit(EXTERNAL_ID, dst, encode(msg, self.keys[dst]))


class Simulator:
    def __init__(self, topology: Topology, schedule: AdversarySchedule | None = None,
                 duration_nanos: int = 10_000_000_000, seed: int | None = None):
        if duration_nanos <= 0:
            raise ValueError("duration must be positive")
        self.topology = topology
        self.schedule = schedule or AdversarySchedule()
        self.seed = self.schedule.seed if seed is None else seed
        self.duration = duration_nanos
        self.clock = VirtualClock()
        self.oracle = OracleClock(self.clock, topology.epoch_offset_nanos)
        self.trace = RunTrace(self.seed)
        self.rng = random.Random(f"{self.seed}/net")
        self._heap: list = []
        self._seq = 0
        self._rules: list[_Rule] = []
        self._isolated: dict[int, int] = {}
        self.refresh_period = topology.settings.get(
            "refresh_period_nanos", NodeSettings.__dataclass_fields__["refresh_period_nanos"].default)
        self.runtimes: dict[int, _Runtime] = {}
        self._build()

    # -- setup -------------------------------------------------------------

    def _node_settings(self, node_id: int) -> NodeSettings:
        names = {f.name for f in fields(NodeSettings)}
        extra = {k: v for k, v in self.topology.settings.items() if k in names}
        unknown = set(self.topology.settings) - names
        if unknown:
            raise ValueError(f"unknown node settings {sorted(unknown)}")
        return NodeSettings(node_id=node_id, peers=list(self.topology.nodes), **extra)

    def _build(self) -> None:
        topo = self.topology
        rate_rng = random.Random(f"{self.seed}/rates")
        ext_keys = {}
        for i, node_id in enumerate(topo.nodes):
            if topo.counter_rates and node_id in topo.counter_rates:
                rate = Fraction(topo.counter_rates[node_id])
            else:
                ppm = rate_rng.randint(-topo.counter_ppm, topo.counter_ppm) if topo.counter_ppm else 0
                rate = topo.host.counter_rate * Fraction(1_000_000 + ppm, 1_000_000)
            params = replace(topo.host, counter_rate=rate)
            host = SimulatedHost(self.clock, params, random.Random(f"{self.seed}/host/{node_id}"))
            rt = _Runtime(self, node_id, host)
            keys = {peer: link_key(node_id, peer, self.seed) for peer in topo.nodes if peer != node_id}
            keys[EXTERNAL_ID] = link_key(node_id, EXTERNAL_ID, self.seed)
            ext_keys[node_id] = keys[EXTERNAL_ID]
            rt.node = TriadNode(self._node_settings(node_id), rt, keys)
            self.runtimes[node_id] = rt
        self.external = _ExternalResponder(self, ext_keys)
        for ev in self.schedule.events:
            self._install(ev.at, ev.action)
        for i, rt in enumerate(self.runtimes.values()):
            self._arm_exit(rt)
            start = i * topo.start_stagger_nanos
            self._at(start, self._deliver, rt, rt.node.bootstrap, (), None)
            if topo.client_interval_nanos:
                self._at(start + topo.client_interval_nanos, self._client_tick, rt)

    def _targets(self, node: int | None) -> list[_Runtime]:
        if node is None:
            return list(self.runtimes.values())
        if node not in self.runtimes:
            raise ValueError(f"schedule names unknown node {node}")
        return [self.runtimes[node]]

    def _install(self, at: int, action) -> None:
        if isinstance(action, ForceExit):
            for rt in self._targets(action.node):
                rt.host.schedule_exit(at, action.duration)
        elif isinstance(action, SetCounterRate):
            for rt in self._targets(action.node):
                rt.host.schedule_exit(at, action.duration, counter_rate=action.ratio)
        elif isinstance(action, OverwriteCounter):
            for rt in self._targets(action.node):
                rt.host.schedule_exit(at, action.duration, overwrite_ticks=action.ticks)
        elif isinstance(action, SetCpuFrequencyScale):
            for rt in self._targets(action.node):
                rt.host.schedule_exit(at, action.duration, cpu_scale=action.ratio)
        elif isinstance(action, IsolateNode):
            self._targets(action.node)
            self._at(at, self._isolate, action)
        elif isinstance(action, (DelayMessage, DropMessage, ReplayMessage)):
            self._at(at, self._activate, action)
        else:
            raise TypeError(f"unsupported action {action!r}")

    # -- event loop ----------------------------------------------------------

    def _at(self, t: int, fn: Callable, *args) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (t, self._seq, fn, args))

    def run(self) -> RunTrace:
        heap = self._heap
        end = self.duration
        while heap and heap[0][0] <= end:
            t, _, fn, args = heapq.heappop(heap)
            self.clock.advance_to(t)
            fn(*args)
        self.clock.advance_to(max(self.clock.now, end))
        for rt in self.runtimes.values():
            if rt.host.in_enclave and not rt.busy:
                self._sweep(rt)
        self._finish()
        return self.trace

    def _record(self, node: int, kind: str, value: int | None = None, epsilon: int | None = None,
                oracle_error: int | None = None, detail: str = "") -> None:
        self.trace.append(TraceEvent(self.clock.now, node, kind, value, epsilon, oracle_error, detail))

    def _finish(self) -> None:
        for rt in self.runtimes.values():
            s = rt.node.stats
            counters = {
                "local_reads": s.local_reads,
                "peer_reads": s.peer_reads,
                "external_reads": s.external_reads,
                "bootstrap_seeds": s.bootstrap_seeds,
                "serves": s.serves,
                "self_untaints": s.self_untaints,
                "guard_runs": s.guard_runs,
                "restarts": s.restarts,
                "exits": rt.host.exits,
                "refresh_steps": rt.sweep_steps,
                "cache_max_abs_error": rt.cache_max_abs,
            }
            self.trace.counters[rt.id] = counters
            for key in ("local_reads", "peer_reads", "external_reads", "bootstrap_seeds"):
                self._record(rt.id, key, counters[key])

    # -- node delivery ---------------------------------------------------------

    def _deliver(self, rt: _Runtime, fn: Callable, args: tuple, timer: Timer | None) -> None:
        if timer is not None and timer.cancelled:
            return
        if not rt.host.in_enclave or rt.busy:
            rt.backlog.append((fn, args, timer))
            return
        self._sweep(rt)
        fn(*args)
        if rt.backlog:
            self._drain(rt)

    def _drain(self, rt: _Runtime) -> None:
        while rt.backlog and rt.host.in_enclave and not rt.busy:
            fn, args, timer = rt.backlog.popleft()
            if timer is not None and timer.cancelled:
                continue
            self._sweep(rt)
            fn(*args)

    def _client_tick(self, rt: _Runtime) -> None:
        self._at(self.clock.now + self.topology.client_interval_nanos, self._client_tick, rt)
        self._deliver(rt, rt.node.serve_client, (("client", self.clock.now),), None)

    # -- exits -------------------------------------------------------------------

    def _arm_exit(self, rt: _Runtime) -> None:
        rt.exit_token += 1
        at = rt.host.next_exit_at()
        if at is not None:
            self._at(max(at, self.clock.now), self._on_exit, rt, rt.exit_token)

    def _on_exit(self, rt: _Runtime, token: int) -> None:
        if token != rt.exit_token or not rt.host.in_enclave:
            return
        if not rt.busy:
            self._sweep(rt)
        epoch_start = rt.host.epoch_start
        reentry = rt.host.begin_exit()
        self._record(rt.id, "exit", self.clock.now - epoch_start)
        self._at(reentry, self._on_reentry, rt)

    def _on_reentry(self, rt: _Runtime) -> None:
        rt.host.end_exit()
        rt.swept_to = self.clock.now
        self._record(rt.id, "reentry")
        self._arm_exit(rt)
        if not rt.busy:
            rt.node.refresh_cache()
        self._drain(rt)

    # -- timing windows ------------------------------------------------------------

    def _start_window(self, rt: _Runtime, kind: str, ticks: int, callback: Callable) -> None:
        self._sweep(rt)
        plan = rt.host.plan_window(kind, ticks)
        rt.busy = True
        if plan.interrupt_at is not None:
            self._at(plan.interrupt_at, self._window_done, rt, callback, WindowInterrupted(kind))
        else:
            self._at(self.clock.now + plan.real_nanos, self._window_done, rt, callback, plan.sample)

    def _window_done(self, rt: _Runtime, callback: Callable, result) -> None:
        rt.busy = False
        # the refresher was paused for the window
        rt.swept_to = max(rt.swept_to, self.clock.now)
        if rt.host.in_enclave:
            callback(result)
            self._drain(rt)
        else:
            rt.backlog.appendleft((callback, (result,), None))

    # -- refresher ---------------------------------------------------------------

    def _sweep(self, rt: _Runtime) -> None:
        now = self.clock.now
        host = rt.host
        if rt.swept_to < host.epoch_start:
            rt.swept_to = host.epoch_start
        params = rt.node.sweep_params()
        if params is None or now <= rt.swept_to:
            rt.swept_to = max(rt.swept_to, now)
            return
        period = self.refresh_period
        k_first = (rt.swept_to - host.epoch_start) // period + 1
        k_last = (now - host.epoch_start) // period
        rt.swept_to = now
        n = k_last - k_first + 1
        if n <= 0:
            return
        real0 = host.epoch_start + k_first * period
        mul, div = host.tick_params()
        c0 = (real0 - host.epoch_start) * mul
        ticks0 = host.epoch_base_ticks + c0 // div
        tick_q, tick_r = divmod(period * mul, div)
        every = self.topology.cache_sample_every
        phase = (-(real0 // period)) % every if every else 0
        anchor_nanos, anchor_ticks, ratio_fp, floor = params
        last, ticks, err_sum, abs_sum, max_abs, max_signed, samples = kernels.sweep_refresh(
            anchor_nanos, anchor_ticks, ratio_fp, floor, ticks0, tick_q, tick_r, c0 % div, div, n,
            self.oracle.epoch_offset_nanos + real0, period, every, phase)
        rt.node.commit_sweep(ticks, host.epoch_id, n)
        rt.sweep_steps += n
        rt.cache_err_sum += err_sum
        rt.cache_abs_sum += abs_sum
        rt.cache_max_abs = max(rt.cache_max_abs, max_abs)
        for oracle_t, value, err in samples:
            self.trace.append(TraceEvent(oracle_t - self.oracle.epoch_offset_nanos, rt.id, "cache",
                                         value, None, err))

    # -- network ---------------------------------------------------------------------

    def _activate(self, action) -> None:
        expires = None if action.for_nanos is None else self.clock.now + action.for_nanos
        self._rules.append(_Rule(action, expires))

    def _isolate(self, action: IsolateNode) -> None:
        until = self.clock.now + action.duration
        self._isolated[action.node] = max(self._isolated.get(action.node, 0), until)
        self._record(action.node, "isolated", action.duration)

    def _is_isolated(self, node: int) -> bool:
        return self._isolated.get(node, -1) > self.clock.now

    def _transmit(self, src: int, dst: int, data: bytes) -> None:
        now = self.clock.now
        header = peek_header(data)
        msg_type = header[0] if header else 0
        if self._is_isolated(src) or self._is_isolated(dst):
            self._record(src, "net_drop", detail=f"dst={dst} isolated")
            return
        drop = False
        delay = 0
        replays: list[int] = []
        live = []
        for rule in self._rules:
            if rule.expires is not None and now >= rule.expires:
                continue
            live.append(rule)
            a = rule.action
            if not a.match.matches(src, dst, msg_type):
                continue
            index = rule.seen
            rule.seen += 1
            if a.match.index is not None and index != a.match.index:
                continue
            if isinstance(a, DropMessage):
                drop = True
            elif isinstance(a, DelayMessage):
                delay += a.delay
            else:
                replays.append(a.after)
        self._rules = live
        if drop:
            self._record(src, "net_drop", detail=f"dst={dst}")
            return
        link = self.topology.external_link if EXTERNAL_ID in (src, dst) else self.topology.link
        arrive = now + link.sample(self.rng) + delay
        self._at(arrive, self._arrive, dst, data)
        for after in replays:
            self._at(arrive + after, self._arrive, dst, data)

    def _arrive(self, dst: int, data: bytes) -> None:
        if dst == EXTERNAL_ID:
            self.external.handle(data)
            return
        rt = self.runtimes.get(dst)
        if rt is None:
            return
        if self._is_isolated(dst):
            self._record(dst, "net_drop", detail=f"dst={dst} isolated")
            return
        self._deliver(rt, rt.node.handle_datagram, (data,), None)


def run_simulation(topology: Topology, schedule: AdversarySchedule | None = None,
                   duration_nanos: int = 10_000_000_000, seed: int | None = None) -> RunTrace:
    return Simulator(topology, schedule, duration_nanos, seed).run()
