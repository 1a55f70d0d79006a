"""The per-node state machine.

A node keeps a cached timestamp that a refresher advances from the raw
counter. Any exit taints the cache; the node then asks its peers in
round-robin order for their time, falls back to the external source only
when no peer can help, and re-runs the rate guard before serving again.

The node is written against :class:`NodeEnv` so the same code runs under
the discrete-event simulator and under the threaded daemon. Every entry
point (datagram, client request, timer) is expected to run to completion
without interleaving with another, which the simulator gets for free and
the daemon gets from a single lock.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Protocol

from .calibration import CalibrationFailed, CalibrationParams, CalibrationResult, CalibrationSession
from .core import (
    DriftRate,
    OffEnclaveInterval,
    Provenance,
    ResidualPolicy,
    ResolutionUnit,
    RttEstimate,
    TrustedTimestamp,
    advance_by_resolution,
    apply_drift,
    compute_error_bound,
    ticks_for_nanos,
)
from .guard import GuardConfig, GuardVerdict, VerdictKind, judge_frequency, judge_rate
from .host import (
    EnclaveHost,
    HostCounterReading,
    InstructionTimingSample,
    MemoryTimingSample,
    WindowInterrupted,
)
from .wire import (
    EXTERNAL_ID,
    FailureState,
    MsgType,
    NonceCounter,
    ReplayWindow,
    WireError,
    WireMessage,
    decode,
    encode,
)


class Unavailable(Exception):
    """No peer and no external source could untaint the node."""


class BootstrapFailed(Exception):
    pass


class Phase(enum.Enum):
    IDLE = "idle"
    CALIBRATING = "calibrating"
    SEEDING = "seeding"
    SERVING = "serving"
    TERMINATED = "terminated"
    FAILED = "failed"


class OutcomeKind(enum.Enum):
    SELF_UNTAINT = "self_untaint"
    PEER_ADOPT = "peer_adopt"
    EXTERNAL_ADOPT = "external_adopt"


@dataclass(frozen=True)
class UntaintOutcome:
    kind: OutcomeKind
    adopted: TrustedTimestamp


@dataclass
class ClockCache:
    last: TrustedTimestamp
    last_raw: HostCounterReading
    tainted: bool = False


class PeerRing:
    def __init__(self, peers: list[int]):
        self.peers = list(peers)
        self.cursor = 0

    def __len__(self) -> int:
        return len(self.peers)

    def next(self) -> int:
        peer = self.peers[self.cursor]
        self.cursor = (self.cursor + 1) % len(self.peers)
        return peer

    @classmethod
    def for_node(cls, node_id: int, peers: list[int]) -> PeerRing:
        """Peers in id order, starting just after ``node_id``."""
        ordered = sorted(p for p in set(peers) if p != node_id)
        after = [p for p in ordered if p > node_id]
        return cls(after + [p for p in ordered if p < node_id])


@dataclass(frozen=True)
class Anchor:
    """The last remote-derived time and the counter reading it maps to."""

    nanos: int
    ticks: int
    epoch_id: int
    error_bound_nanos: int


@dataclass
class NodeSettings:
    node_id: int
    peers: list[int] = field(default_factory=list)
    resolution: ResolutionUnit = field(default_factory=ResolutionUnit)
    refresh_period_nanos: int = 20_000
    initial_rtt_nanos: int = 70_000
    timeout_factor: int = 4
    external_timeout_nanos: int = 1_000_000_000
    # delay between reading the cache for a peer reply and committing the send
    processing_nanos: int = 2_000
    defer_backoff_nanos: int = 10_000_000
    retry_backoff_nanos: int = 100_000_000
    bootstrap_retries: int = 3
    calibration: CalibrationParams = field(default_factory=CalibrationParams.for_limit)
    guard: GuardConfig = field(default_factory=GuardConfig)
    residual: ResidualPolicy = field(default_factory=ResidualPolicy)

    @property
    def max_deferrals(self) -> int:
        return self.external_timeout_nanos // self.defer_backoff_nanos + 3


class NodeEnv(Protocol):
    host: EnclaveHost

    def send(self, dst: int, datagram: bytes) -> None: ...

    def call_later(self, delay_nanos: int, fn: Callable, *args) -> Any: ...

    def cancel(self, handle: Any) -> None: ...

    def start_window(self, kind: str, target_ticks: int, callback: Callable) -> None:
        """Run a timing window; ``callback`` gets a sample or WindowInterrupted."""

    def respond(self, client: Any, result: TrustedTimestamp | None) -> None: ...

    def record(self, kind: str, value: int | None = None, epsilon: int | None = None,
               detail: str = "") -> None: ...

    def lifecycle(self, event: str) -> None:
        """``serving``, ``rate_violation``, ``frequency_violation`` or ``bootstrap_failed``."""


@dataclass
class _Pending:
    peer: int
    nonce: bytes
    sent: HostCounterReading
    timer: Any


@dataclass
class _Cycle:
    exits_at_start: int
    epoch_id: int
    asked: set[int] = field(default_factory=set)
    failures: dict[int, FailureState] = field(default_factory=dict)
    pending: _Pending | None = None
    external: _Pending | None = None
    deferrals: int = 0
    waiting: bool = False


@dataclass
class NodeStats:
    local_reads: int = 0
    peer_reads: int = 0
    external_reads: int = 0
    bootstrap_seeds: int = 0
    serves: int = 0
    self_untaints: int = 0
    guard_runs: int = 0
    restarts: int = 0


class TriadNode:
    def __init__(self, settings: NodeSettings, env: NodeEnv, keys: dict[int, bytes]):
        self.settings = settings
        self.id = settings.node_id
        self.env = env
        self.host = env.host
        self.keys = dict(keys)
        self.ring = PeerRing.for_node(self.id, settings.peers)
        self.phase = Phase.IDLE
        self.cache: ClockCache | None = None
        self.anchor: Anchor | None = None
        self.calib: CalibrationResult | None = None
        self.session: CalibrationSession | None = None
        self.blocked: deque = deque()
        self.stats = NodeStats()
        self.last_outcome: UntaintOutcome | None = None
        # survives restarts, like sealed state
        self.nonces = NonceCounter(self.id)
        self.window = ReplayWindow()
        self.high: TrustedTimestamp | None = None
        self._cycle: _Cycle | None = None
        self._guarding = False
        self._exits_seen = 0
        self._gen = 0
        self._seed: _Pending | None = None
        self._seed_attempts = 0
        self._rtt_mean = settings.initial_rtt_nanos
        self._guard_timer = None

    # -- plumbing --------------------------------------------------------

    def _later(self, delay: int, fn: Callable, *args) -> Any:
        gen = self._gen

        def fire() -> None:
            if gen == self._gen:
                fn(*args)

        return self.env.call_later(delay, fire)

    def _cancel(self, handle: Any) -> None:
        if handle is not None:
            self.env.cancel(handle)

    def _send(self, dst: int, msg_type: MsgType, **fields) -> bytes:
        seq = self.nonces.next()
        msg = WireMessage(msg_type, self.id, seq, **fields)
        self.env.send(dst, encode(msg, self.keys[dst]))
        return msg.nonce

    @property
    def drift(self) -> DriftRate:
        return self.calib.drift

    @property
    def policy(self) -> ResidualPolicy:
        return self.settings.residual

    @property
    def peer_timeout_nanos(self) -> int:
        return self.settings.timeout_factor * self._rtt_mean

    def _record(self, kind: str, value: int | None = None, epsilon: int | None = None,
                detail: str = "") -> None:
        self.env.record(kind, value, epsilon, detail)

    # -- bootstrap -------------------------------------------------------

    def bootstrap(self) -> None:
        if self.phase not in (Phase.IDLE, Phase.TERMINATED, Phase.FAILED):
            raise RuntimeError(f"cannot bootstrap from {self.phase}")
        self._gen += 1
        self.phase = Phase.CALIBRATING
        self.cache = None
        self.anchor = None
        self.calib = None
        self._cycle = None
        self._guarding = False
        self._seed_attempts = 0
        self._exits_seen = self.host.poll_exit_flag().exits_observed
        self._record("bootstrap")
        self.session = CalibrationSession(
            self.host, self.settings.calibration,
            send_request=lambda pp: self._send(EXTERNAL_ID, MsgType.CAL_REQUEST, pp_nanos=pp),
            call_later=self._later,
            cancel=self._cancel,
            start_window=self._start_window,
            on_done=self._calibrated,
            record=self._record,
            memory_check=self.settings.guard.memory_check,
        )
        self.session.start()

    def _start_window(self, kind: str, ticks: int, callback: Callable) -> None:
        gen = self._gen

        def done(result) -> None:
            if gen == self._gen:
                callback(result)

        self.env.start_window(kind, ticks, done)

    def _calibrated(self, result: CalibrationResult | CalibrationFailed) -> None:
        if isinstance(result, CalibrationFailed):
            self._record("calibration_failed", detail=str(result))
            self._fail("bootstrap_failed")
            return
        self.calib = result
        self._record("calibrated", value=result.drift.ratio_fp,
                     detail=f"rounds={result.rounds_succeeded}/{result.rounds_attempted}")
        self.phase = Phase.SEEDING
        self._request_seed()

    def _request_seed(self) -> None:
        self._seed_attempts += 1
        self.host.clear_exit_flag()
        self._exits_seen = self.host.poll_exit_flag().exits_observed
        sent = self.host.read_counter()
        nonce = self._send(EXTERNAL_ID, MsgType.EXT_REQUEST)
        timer = self._later(self.settings.external_timeout_nanos, self._seed_timeout, nonce)
        self._seed = _Pending(EXTERNAL_ID, nonce, sent, timer)

    def _seed_timeout(self, nonce: bytes) -> None:
        if self._seed is None or self._seed.nonce != nonce:
            return
        self._seed = None
        self._record("seed_timeout")
        self._retry_seed()

    def _retry_seed(self) -> None:
        if self._seed_attempts >= self.settings.bootstrap_retries:
            self._fail("bootstrap_failed")
        else:
            self._request_seed()

    def _on_seed_reply(self, msg: WireMessage) -> None:
        p = self._seed
        if p is None or msg.echo_nonce != p.nonce:
            return
        self._cancel(p.timer)
        self._seed = None
        flag = self.host.poll_exit_flag()
        received = self.host.read_counter()
        if flag.exits_observed != self._exits_seen or received.epoch_id != p.sent.epoch_id:
            self._record("seed_aborted")
            self._request_seed()
            return
        adopted = self._remote_value(msg, p.sent, received, Provenance.EXTERNAL)
        self.stats.bootstrap_seeds += 1
        if self.high is not None and adopted.nanos <= self.high.nanos:
            last = self.high
        else:
            last = adopted
        self.anchor = Anchor(adopted.nanos, received.ticks, received.epoch_id, adopted.error_bound_nanos)
        self.cache = ClockCache(last, received)
        self.host.clear_exit_flag()
        self.phase = Phase.SERVING
        self._record("bootstrap_seed", adopted.nanos, adopted.error_bound_nanos)
        self.env.lifecycle("serving")
        self._run_guard()
        self._schedule_periodic_guard()

    def _fail(self, event: str) -> None:
        self.phase = Phase.FAILED
        self._gen += 1
        self._flush_unavailable()
        self._record(event)
        self.env.lifecycle(event)

    # -- local clock -------------------------------------------------------

    def estimate(self, ticks: int) -> tuple[int, int, int]:
        """``(nanos, error_bound, residual)`` for a counter value in the anchor's epoch."""
        a = self.anchor
        elapsed = apply_drift(max(ticks - a.ticks, 0), self.drift)
        residual = self.policy.residual(elapsed)
        return a.nanos + elapsed, a.error_bound_nanos + residual, residual

    def refresh_active(self) -> bool:
        return (self.phase is Phase.SERVING and self.cache is not None
                and not self.cache.tainted and not self._guarding)

    def refresh_cache(self) -> None:
        if self.phase in (Phase.CALIBRATING, Phase.SEEDING):
            flag = self.host.poll_exit_flag()
            if flag.exits_observed != self._exits_seen:
                self._exits_seen = flag.exits_observed
                self.host.clear_exit_flag()
                if self.phase is Phase.CALIBRATING:
                    self.session.on_reentry()
                elif self._seed is not None:
                    self._cancel(self._seed.timer)
                    self._seed = None
                    self._record("seed_aborted")
                    self._request_seed()
            return
        if self.phase is not Phase.SERVING or self.cache.tainted:
            return
        flag = self.host.poll_exit_flag()
        reading = self.host.read_counter()
        if (flag.tainted or flag.exits_observed != self._exits_seen
                or reading.epoch_id != self.anchor.epoch_id):
            self._taint()
            return
        self._advance(reading)
        self.stats.local_reads += 1

    def _advance(self, reading: HostCounterReading) -> None:
        nanos, eps, residual = self.estimate(reading.ticks)
        cache = self.cache
        if nanos > cache.last.nanos:
            cache.last = TrustedTimestamp(nanos, Provenance.LOCAL, eps, None, residual)
        cache.last_raw = reading

    def sweep_params(self) -> tuple[int, int, int, int] | None:
        """``(anchor_nanos, anchor_ticks, ratio_fp, floor)`` for batched refreshes."""
        if not self.refresh_active():
            return None
        a = self.anchor
        return a.nanos, a.ticks, self.drift.ratio_fp, self.cache.last.nanos

    def commit_sweep(self, last_ticks: int, epoch_id: int, count: int) -> None:
        """Apply ``count`` refreshes already computed outside the node."""
        if count <= 0 or not self.refresh_active() or epoch_id != self.anchor.epoch_id:
            return
        self._advance(HostCounterReading(last_ticks, epoch_id))
        self.stats.local_reads += count

    def _taint(self) -> None:
        self.cache.tainted = True
        self._record("taint", self.cache.last.nanos)
        if self._cycle is None and not self._guarding:
            self._start_cycle()

    # -- serving -----------------------------------------------------------

    def serve_client(self, client: Any) -> TrustedTimestamp | None:
        if self.phase in (Phase.TERMINATED, Phase.FAILED, Phase.IDLE):
            self.env.respond(client, None)
            return None
        self.blocked.append(client)
        if self.phase is not Phase.SERVING or self._guarding:
            return None
        self.refresh_cache()
        if self.cache.tainted:
            return None
        return self._drain()

    def _drain(self) -> TrustedTimestamp | None:
        ts = None
        while self.blocked and self.refresh_active():
            ts = self._serve_now(self.cache.last_raw)
            self.env.respond(self.blocked.popleft(), ts)
        return ts

    def _serve_now(self, reading: HostCounterReading) -> TrustedTimestamp:
        nanos, eps, residual = self.estimate(reading.ticks)
        if self.high is not None and nanos <= self.high.nanos:
            bumped = advance_by_resolution(self.high, self.settings.resolution)
            # the value runs ahead of the counter; widen the bound by the lead
            eps += bumped.nanos - nanos
            nanos = bumped.nanos
        ts = TrustedTimestamp(nanos, Provenance.LOCAL, eps, None, residual)
        self.high = ts
        if nanos > self.cache.last.nanos:
            self.cache.last = ts
        self.stats.serves += 1
        return ts

    def _flush_unavailable(self) -> None:
        while self.blocked:
            self.env.respond(self.blocked.popleft(), None)

    # -- untainting --------------------------------------------------------

    def _start_cycle(self) -> None:
        flag = self.host.poll_exit_flag()
        reading = self.host.read_counter()
        self._exits_seen = flag.exits_observed
        self._cycle = _Cycle(flag.exits_observed, reading.epoch_id)
        self._record("cycle_start")
        self._next_peer()

    def _exchange_spoiled(self, c: _Cycle, received: HostCounterReading) -> bool:
        flag = self.host.poll_exit_flag()
        return flag.exits_observed != c.exits_at_start or received.epoch_id != c.epoch_id

    def _next_peer(self) -> None:
        c = self._cycle
        peer = None
        for _ in range(len(self.ring)):
            candidate = self.ring.next()
            if candidate not in c.asked:
                peer = candidate
                break
        if peer is None:
            self._peers_exhausted()
            return
        sent = self.host.read_counter()
        nonce = self._send(peer, MsgType.TS_REQUEST)
        timer = self._later(self.peer_timeout_nanos, self._peer_timeout, c, nonce)
        c.pending = _Pending(peer, nonce, sent, timer)
        self._record("peer_request", detail=f"peer={peer}")

    def _peer_timeout(self, c: _Cycle, nonce: bytes) -> None:
        if self._cycle is not c or c.pending is None or c.pending.nonce != nonce:
            return
        c.asked.add(c.pending.peer)
        self._record("peer_timeout", detail=f"peer={c.pending.peer}")
        c.pending = None
        if self._exchange_spoiled(c, self.host.read_counter()):
            self._restart_cycle()
            return
        self._next_peer()

    def _restart_cycle(self) -> None:
        self._record("cycle_abort")
        c = self._cycle
        if c is not None:
            for p in (c.pending, c.external):
                if p is not None:
                    self._cancel(p.timer)
        self._cycle = None
        self._start_cycle()

    def _peers_exhausted(self) -> None:
        c = self._cycle
        defer = any(s is FailureState.EXTERNAL for s in c.failures.values()) or any(
            s is FailureState.UNTAINTING and p < self.id for p, s in c.failures.items())
        if defer and c.deferrals < self.settings.max_deferrals:
            c.deferrals += 1
            c.asked.clear()
            c.failures.clear()
            c.waiting = True
            self._record("defer", detail=str(c.deferrals))
            self._later(self.settings.defer_backoff_nanos, self._resume_cycle, c)
            return
        self._fetch_external()

    def _resume_cycle(self, c: _Cycle) -> None:
        if self._cycle is not c:
            return
        c.waiting = False
        if self._exchange_spoiled(c, self.host.read_counter()):
            self._restart_cycle()
            return
        self._next_peer()

    def _fetch_external(self) -> None:
        c = self._cycle
        sent = self.host.read_counter()
        nonce = self._send(EXTERNAL_ID, MsgType.EXT_REQUEST)
        timer = self._later(self.settings.external_timeout_nanos, self._external_timeout, c, nonce)
        c.external = _Pending(EXTERNAL_ID, nonce, sent, timer)
        self._record("external_request")

    def _external_timeout(self, c: _Cycle, nonce: bytes) -> None:
        if self._cycle is not c or c.external is None or c.external.nonce != nonce:
            return
        self._record("external_timeout")
        self._cycle = None
        self._flush_unavailable()
        self._record("unavailable")
        self._later(self.settings.retry_backoff_nanos, self._retry_untaint)

    def _retry_untaint(self) -> None:
        if self.phase is Phase.SERVING and self.cache.tainted and self._cycle is None:
            self._start_cycle()

    def _remote_value(self, msg: WireMessage, sent: HostCounterReading,
                      received: HostCounterReading, provenance: Provenance) -> TrustedTimestamp:
        """Midpoint-corrected remote time with bound ``delta + rtt``."""
        rtt_nanos = apply_drift(received.ticks - sent.ticks, self.drift)
        rtt = RttEstimate(self.policy.widen(rtt_nanos))
        bound = compute_error_bound(OffEnclaveInterval(msg.epsilon_nanos), rtt)
        nanos = msg.nanos + rtt_nanos // 2
        self._record("external_rtt" if provenance is Provenance.EXTERNAL else "peer_rtt", rtt_nanos)
        peer = msg.sender_id if provenance is Provenance.PEER else None
        return TrustedTimestamp(nanos, provenance, bound, peer)

    def _on_peer_reply(self, msg: WireMessage) -> None:
        c = self._cycle
        if c is None or c.pending is None or msg.echo_nonce != c.pending.nonce \
                or msg.sender_id != c.pending.peer:
            self._record("stale_reply", detail=f"peer={msg.sender_id}")
            return
        p = c.pending
        c.pending = None
        self._cancel(p.timer)
        c.asked.add(p.peer)
        received = self.host.read_counter()
        if self._exchange_spoiled(c, received):
            self._restart_cycle()
            return
        rtt_nanos = apply_drift(received.ticks - p.sent.ticks, self.drift)
        self._rtt_mean = (7 * self._rtt_mean + rtt_nanos) // 8
        if msg.msg_type is MsgType.FAILURE_REPLY:
            c.failures[p.peer] = msg.failure_state
            self._record("peer_failure", detail=f"peer={p.peer} {msg.failure_state.name}")
            self._next_peer()
            return
        self.stats.peer_reads += 1
        remote = self._remote_value(msg, p.sent, received, Provenance.PEER)
        last = self.cache.last
        if remote.nanos > last.nanos:
            self._adopt(OutcomeKind.PEER_ADOPT, remote, received)
        else:
            self._adopt(OutcomeKind.SELF_UNTAINT, self._self_untaint(last, remote), received)

    def _self_untaint(self, last: TrustedTimestamp, remote: TrustedTimestamp) -> TrustedTimestamp:
        bumped = advance_by_resolution(last, self.settings.resolution)
        # last + unit sits above the peer's value; both views bound the error
        eps = max(last.error_bound_nanos + self.settings.resolution.nanos_per_tick,
                  remote.error_bound_nanos)
        return TrustedTimestamp(bumped.nanos, Provenance.LOCAL, eps)

    def _on_external_reply(self, msg: WireMessage) -> None:
        if self.phase is Phase.SEEDING:
            self._on_seed_reply(msg)
            return
        c = self._cycle
        if c is None or c.external is None or msg.echo_nonce != c.external.nonce:
            self._record("stale_reply", detail=f"peer={msg.sender_id}")
            return
        p = c.external
        c.external = None
        self._cancel(p.timer)
        received = self.host.read_counter()
        if self._exchange_spoiled(c, received):
            self._restart_cycle()
            return
        self.stats.external_reads += 1
        remote = self._remote_value(msg, p.sent, received, Provenance.EXTERNAL)
        last = self.cache.last
        if remote.nanos <= last.nanos:
            remote = self._self_untaint(last, remote)
        self._adopt(OutcomeKind.EXTERNAL_ADOPT, remote, received)

    def _adopt(self, kind: OutcomeKind, adopted: TrustedTimestamp, received: HostCounterReading) -> None:
        self.anchor = Anchor(adopted.nanos, received.ticks, received.epoch_id, adopted.error_bound_nanos)
        self.cache.last = adopted
        self.cache.last_raw = received
        self.cache.tainted = False
        self.host.clear_exit_flag()
        self._cycle = None
        self.last_outcome = UntaintOutcome(kind, adopted)
        if kind is OutcomeKind.SELF_UNTAINT:
            self.stats.self_untaints += 1
        self._record(kind.value, adopted.nanos, adopted.error_bound_nanos)
        self._run_guard()

    # -- peer requests -------------------------------------------------------

    def _failure_state(self) -> FailureState:
        if self.phase is not Phase.SERVING:
            return FailureState.UNAVAILABLE
        c = self._cycle
        if c is not None and c.external is not None:
            return FailureState.EXTERNAL
        return FailureState.UNTAINTING

    def handle_peer_request(self, msg: WireMessage) -> None:
        if self.refresh_active():
            self.refresh_cache()
        if not self.refresh_active():
            state = self._failure_state()
            self._send(msg.sender_id, MsgType.FAILURE_REPLY, echo_nonce=msg.nonce, failure_state=state)
            self._record("failure_reply", detail=f"peer={msg.sender_id} {state.name}")
            if (self.phase is Phase.SERVING and self.cache.tainted
                    and self._cycle is None and not self._guarding):
                self._start_cycle()
            return
        nanos, eps, _ = self.estimate(self.cache.last_raw.ticks)
        last = self.cache.last
        if last.nanos > nanos:
            nanos, eps = last.nanos, max(eps, last.error_bound_nanos)
        exits = self.host.poll_exit_flag().exits_observed
        delay = self.settings.processing_nanos
        if delay:
            self._later(delay, self._commit_reply, msg, nanos, eps, exits)
        else:
            self._commit_reply(msg, nanos, eps, exits)

    def _commit_reply(self, msg: WireMessage, nanos: int, eps: int, exits: int) -> None:
        flag = self.host.poll_exit_flag()
        if flag.tainted or flag.exits_observed != exits:
            self._record("reply_aborted", detail=f"peer={msg.sender_id}")
            return
        self._send(msg.sender_id, MsgType.TS_REPLY, echo_nonce=msg.nonce, nanos=nanos, epsilon_nanos=eps)
        self._record("peer_reply", nanos, eps, detail=f"peer={msg.sender_id}")

    # -- datagrams -------------------------------------------------------------

    def handle_datagram(self, data: bytes, client: Any = None) -> None:
        """Entry point for every received datagram.

        ``client`` is the transport's return address, passed through to
        :meth:`NodeEnv.respond` for client requests.
        """
        try:
            msg = decode(data, self.keys, self.window)
        except WireError as exc:
            self._record("drop", detail=type(exc).__name__)
            return
        t = msg.msg_type
        if t is MsgType.TS_REQUEST:
            if msg.sender_id in self.ring.peers:
                self.handle_peer_request(msg)
            else:
                self.serve_client((msg.sender_id, msg.nonce, client))
        elif t in (MsgType.TS_REPLY, MsgType.FAILURE_REPLY):
            self._on_peer_reply(msg)
        elif t is MsgType.CAL_REPLY:
            if self.phase is Phase.CALIBRATING and msg.sender_id == EXTERNAL_ID:
                self.session.on_reply(msg.echo_nonce, msg.elapsed_nanos, msg.nanos)
        elif t is MsgType.EXT_REPLY and msg.sender_id == EXTERNAL_ID:
            self._on_external_reply(msg)
        else:
            self._record("drop", detail=f"unexpected {t.name}")

    def client_reply(self, client: tuple, ts: TrustedTimestamp | None) -> bytes:
        """Encode the answer to a wire client request."""
        sender, nonce, _ = client
        if ts is None:
            msg = WireMessage(MsgType.FAILURE_REPLY, self.id, self.nonces.next(),
                              echo_nonce=nonce, failure_state=FailureState.UNAVAILABLE)
        else:
            msg = WireMessage(MsgType.TS_REPLY, self.id, self.nonces.next(), echo_nonce=nonce,
                              nanos=ts.nanos, epsilon_nanos=ts.error_bound_nanos)
        return encode(msg, self.keys[sender])

    # -- rate guard --------------------------------------------------------------

    def _schedule_periodic_guard(self) -> None:
        period = self.settings.guard.periodic_nanos
        if period:
            self._guard_timer = self._later(period, self._periodic_guard)

    def _periodic_guard(self) -> None:
        if self.refresh_active() and self._cycle is None:
            self._run_guard()
        self._schedule_periodic_guard()

    def _run_guard(self) -> None:
        self._guarding = True
        self.stats.guard_runs += 1
        target = ticks_for_nanos(self.settings.guard.window_nanos, self.drift)
        self._start_window("instruction", target, self._on_rate_window)

    def _on_rate_window(self, result) -> None:
        if isinstance(result, WindowInterrupted):
            self._guard_done(GuardVerdict(VerdictKind.INTERRUPTED))
            return
        verdict = judge_rate(result, self.drift, self.calib, self.settings.guard.rate_threshold)
        if verdict.passed and self.settings.guard.memory_check:
            target = result.window_ticks
            self._start_window("memory", target, lambda mem: self._on_memory_window(result, mem))
            return
        self._guard_done(verdict)

    def _on_memory_window(self, instr: InstructionTimingSample, mem) -> None:
        if isinstance(mem, WindowInterrupted):
            self._guard_done(GuardVerdict(VerdictKind.INTERRUPTED))
            return
        self._guard_done(judge_frequency(instr, mem, self.calib, self.settings.guard.frequency_threshold))

    def _guard_done(self, verdict: GuardVerdict) -> None:
        ratio = verdict.measured_ratio
        ppm = None if ratio is None else round(ratio * 1_000_000)
        self._record("guard", ppm, detail=verdict.kind.value)
        if verdict.kind in (VerdictKind.RATE_VIOLATION, VerdictKind.FREQUENCY_VIOLATION):
            self.terminate(verdict.kind.value)
            return
        self._guarding = False
        if verdict.kind is VerdictKind.INTERRUPTED:
            # the exit tainted the cache; untaint, then the guard runs again
            if not self.cache.tainted:
                self.cache.tainted = True
                self._record("taint", self.cache.last.nanos)
            if self._cycle is None:
                self._start_cycle()
            return
        self.refresh_cache()
        self._drain()

    def terminate(self, reason: str) -> None:
        """Stop serving; the owner restarts the node through :meth:`bootstrap`."""
        self._gen += 1
        self.phase = Phase.TERMINATED
        self._cycle = None
        self._guarding = False
        self._seed = None
        if self.session is not None:
            self.session.abort()
        self._flush_unavailable()
        self._record("terminated", detail=reason)
        self.env.lifecycle(reason)

    def restart(self) -> None:
        self.stats.restarts += 1
        self.bootstrap()
