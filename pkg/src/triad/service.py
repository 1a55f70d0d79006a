"""The UDP daemon, the external time stub and a small query client.

The daemon drives the same :class:`~triad.node.TriadNode` the simulator
drives. Three threads feed it (datagram listener, refresher, timers) and
every call into the node happens under one lock, so the node still sees one
event at a time.
"""

from __future__ import annotations

import csv
import heapq
import itertools
import logging
import signal
import socket
import threading
import time
from dataclasses import fields
from pathlib import Path
from typing import Any, Callable

from .config import ConfigError, NodeConfig
from .core import Provenance, TrustedTimestamp
from .host import RealHost, WindowInterrupted
from .node import NodeSettings, Phase, TriadNode
from .sim.trace import CSV_HEADER
from .wire import (
    EXTERNAL_ID,
    FailureState,
    MsgType,
    NonceCounter,
    ReplayWindow,
    Timeout,
    WireError,
    WireMessage,
    decode,
    encode,
)

log = logging.getLogger("triad.service")

EXIT_CLEAN = 0
EXIT_CONFIG = 2
EXIT_BOOTSTRAP_FAILED = 10
EXIT_RATE_VIOLATION = 11
EXIT_UNAVAILABLE = 12

_LIFECYCLE_EXIT = {
    "bootstrap_failed": EXIT_BOOTSTRAP_FAILED,
    "rate_violation": EXIT_RATE_VIOLATION,
    "frequency_violation": EXIT_RATE_VIOLATION,
}
# host knobs that live in the [timing] table next to the node timers
_HOST_KEYS = ("host_poll_period_nanos", "host_window_gap_nanos")
MIN_REFRESH_NANOS = 1_000_000


class _Timer:
    __slots__ = ("cancelled",)

    def __init__(self) -> None:
        self.cancelled = False


class TimerWheel:
    """A single thread firing callbacks at monotonic deadlines."""

    def __init__(self, lock: threading.RLock):
        self._lock = lock
        self._heap: list = []
        self._seq = itertools.count()
        self._cv = threading.Condition()
        self._stopped = False
        self._thread = threading.Thread(target=self._run, name="triad-timers", daemon=True)

    def start(self) -> None:
        self._thread.start()

    def stop(self) -> None:
        with self._cv:
            self._stopped = True
            self._cv.notify()
        if self._thread.is_alive() and threading.current_thread() is not self._thread:
            self._thread.join(timeout=2)

    def call_later(self, delay_nanos: int, fn: Callable, *args) -> _Timer:
        timer = _Timer()
        due = time.monotonic_ns() + max(delay_nanos, 0)
        with self._cv:
            heapq.heappush(self._heap, (due, next(self._seq), timer, fn, args))
            self._cv.notify()
        return timer

    def _run(self) -> None:
        while True:
            with self._cv:
                while not self._stopped:
                    if self._heap:
                        wait = (self._heap[0][0] - time.monotonic_ns()) / 1e9
                        if wait <= 0:
                            break
                        self._cv.wait(wait)
                    else:
                        self._cv.wait()
                if self._stopped:
                    return
                _, _, timer, fn, args = heapq.heappop(self._heap)
            if timer.cancelled:
                continue
            with self._lock:
                try:
                    fn(*args)
                except Exception:
                    log.exception("timer callback failed")


class TraceWriter:
    def __init__(self, path: Path | None):
        self.path = path
        self._fh = None
        self._writer = None
        if path is not None:
            # line-buffered so the trace can be followed while the node runs
            self._fh = open(path, "w", newline="", encoding="utf-8", buffering=1)
            self._writer = csv.writer(self._fh, lineterminator="\n")
            self._writer.writerow(CSV_HEADER)

    def write(self, *row) -> None:
        if self._writer is not None:
            self._writer.writerow(["" if v is None else v for v in row])

    def close(self) -> None:
        if self._fh is not None:
            self._fh.flush()
            self._fh.close()
            self._fh = None
            self._writer = None


class NodeService:
    """A node bound to a UDP socket; implements the node's environment."""

    def __init__(self, config: NodeConfig, *, clock: Callable[[], int] = time.time_ns):
        self.config = config
        self.clock = clock
        timing = dict(config.timing)
        host_kw = {k.removeprefix("host_"): timing.pop(k) for k in _HOST_KEYS if k in timing}
        self.host = RealHost(
            poll_period_nanos=host_kw.get("poll_period_nanos", 20_000_000),
            max_window_gap_nanos=host_kw.get("window_gap_nanos", 2_000_000),
        )
        known = {f.name for f in fields(NodeSettings)}
        unknown = set(timing) - known
        if unknown:
            raise ConfigError(f"unknown timing settings {sorted(unknown)}")
        if config.guard.memory_check:
            raise ConfigError("the memory-latency check needs the simulated host")
        self.settings = NodeSettings(
            node_id=config.node_id,
            peers=sorted(config.peers),
            resolution=config.resolution,
            calibration=config.calibration,
            guard=config.guard,
            **timing,
        )
        self.addresses = dict(config.peers)
        self.addresses[EXTERNAL_ID] = config.external
        self.lock = threading.RLock()
        self.timers = TimerWheel(self.lock)
        self.trace = TraceWriter(config.trace_path)
        self.stopping = threading.Event()
        self.exit_code = EXIT_CLEAN
        self.serving = threading.Event()
        self._unavailable_run = 0
        self._started = time.monotonic_ns()
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        try:
            self.sock.bind(config.listen)
        except OSError as exc:
            self.sock.close()
            raise ConfigError(f"cannot bind {config.listen[0]}:{config.listen[1]}: {exc}") from None
        self.sock.settimeout(0.1)
        self.node = TriadNode(self.settings, self, config.keys)
        self._threads = [
            threading.Thread(target=self._listen, name="triad-listener", daemon=True),
            threading.Thread(target=self._refresh, name="triad-refresher", daemon=True),
        ]

    @property
    def address(self) -> tuple[str, int]:
        return self.sock.getsockname()

    # -- NodeEnv -----------------------------------------------------------

    def send(self, dst: int, datagram: bytes) -> None:
        addr = self.addresses.get(dst)
        if addr is None:
            return
        try:
            self.sock.sendto(datagram, addr)
        except OSError as exc:
            log.debug("send to %s failed: %s", dst, exc)

    def call_later(self, delay_nanos: int, fn: Callable, *args) -> _Timer:
        return self.timers.call_later(delay_nanos, fn, *args)

    def cancel(self, handle: _Timer) -> None:
        handle.cancelled = True

    def start_window(self, kind: str, target_ticks: int, callback: Callable) -> None:
        # run after the current entry point returns, still under the lock
        def run() -> None:
            try:
                if kind == "memory":
                    result = self.host.time_memory_window(target_ticks)
                else:
                    result = self.host.time_instruction_window(target_ticks)
            except WindowInterrupted as exc:
                result = exc
            callback(result)

        self.timers.call_later(0, run)

    def respond(self, client: Any, result: TrustedTimestamp | None) -> None:
        if result is not None:
            self._trace("serve", result.nanos, result.error_bound_nanos, result.nanos - self.clock())
        if callable(client):
            client(result)
            return
        sender, nonce, addr = client
        if addr is not None:
            try:
                self.sock.sendto(self.node.client_reply(client, result), addr)
            except OSError as exc:
                log.debug("client reply failed: %s", exc)

    def record(self, kind: str, value: int | None = None, epsilon: int | None = None,
               detail: str = "") -> None:
        self._trace(kind, value, epsilon, None)
        if kind == "calibration_failed":
            log.error("node %d calibration failed: %s", self.node.id, detail)
        if kind == "unavailable":
            self._unavailable_run += 1
            if self._unavailable_run >= self.config.max_unavailable:
                log.error("node %d: no peer or external source reachable", self.node.id)
                self.stop(EXIT_UNAVAILABLE)
        elif kind in ("self_untaint", "peer_adopt", "external_adopt", "bootstrap_seed"):
            self._unavailable_run = 0

    def lifecycle(self, event: str) -> None:
        if event == "serving":
            log.info("node %d serving", self.node.id)
            self.serving.set()
            return
        code = _LIFECYCLE_EXIT.get(event)
        if code is not None:
            log.error("node %d stopping: %s", self.node.id, event)
            self.stop(code)

    # -- threads -----------------------------------------------------------

    def _trace(self, kind: str, value, epsilon, err) -> None:
        self.trace.write(time.monotonic_ns() - self._started, self.node.id, kind, value, epsilon, err)

    def _listen(self) -> None:
        while not self.stopping.is_set():
            try:
                data, addr = self.sock.recvfrom(2048)
            except socket.timeout:
                continue
            except OSError:
                return
            with self.lock:
                if self.stopping.is_set():
                    return
                self.node.handle_datagram(data, addr)

    def _refresh(self) -> None:
        period = max(self.settings.refresh_period_nanos, MIN_REFRESH_NANOS) / 1e9
        while not self.stopping.wait(period):
            with self.lock:
                self.node.refresh_cache()

    # -- control -------------------------------------------------------------

    def start(self) -> None:
        self.timers.start()
        for t in self._threads:
            t.start()
        with self.lock:
            self.node.bootstrap()

    def stop(self, code: int = EXIT_CLEAN) -> None:
        if not self.stopping.is_set():
            self.exit_code = code
            self.stopping.set()

    def now(self, timeout_s: float = 5.0) -> TrustedTimestamp | None:
        """In-process client call: blocks until the node serves a timestamp."""
        done = threading.Event()
        box: list = []

        def answer(ts) -> None:
            box.append(ts)
            done.set()

        with self.lock:
            self.node.serve_client(answer)
        if not done.wait(timeout_s):
            return None
        return box[0]

    def close(self) -> None:
        self.stopping.set()
        self.timers.stop()
        for t in self._threads:
            if t.is_alive():
                t.join(timeout=2)
        self.sock.close()
        with self.lock:
            self.trace.close()

    @property
    def phase(self) -> Phase:
        return self.node.phase


def run_node(config: NodeConfig, *, install_signals: bool = True) -> int:
    """Run until signalled or until the node stops itself; returns the exit code."""
    service = NodeService(config)
    previous = {}
    if install_signals and threading.current_thread() is threading.main_thread():
        for sig in (signal.SIGTERM, signal.SIGINT):
            previous[sig] = signal.signal(sig, lambda *_: service.stop(EXIT_CLEAN))
    try:
        service.start()
        while not service.stopping.wait(0.2):
            pass
    finally:
        service.close()
        for sig, handler in previous.items():
            signal.signal(sig, handler)
    return service.exit_code


class ExternalServer:
    """Stand-in for the trusted external time source, backed by the system clock.

    Answers ExtRequest with the current time and CalRequest after the
    requested wait, reporting the wait it actually observed.
    """

    def __init__(self, listen: tuple[str, int], keys: dict[int, bytes], *,
                 clock: Callable[[], int] = time.time_ns, epsilon_nanos: int = 0):
        self.keys = dict(keys)
        self.clock = clock
        self.epsilon_nanos = epsilon_nanos
        self.window = ReplayWindow()
        self.nonces = NonceCounter(EXTERNAL_ID, time.time_ns())
        self.lock = threading.Lock()
        self.timers = TimerWheel(threading.RLock())
        self.stopping = threading.Event()
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        try:
            self.sock.bind(listen)
        except OSError as exc:
            self.sock.close()
            raise ConfigError(f"cannot bind {listen[0]}:{listen[1]}: {exc}") from None
        self.sock.settimeout(0.1)
        self.requests = 0
        self._thread = threading.Thread(target=self._serve, name="triad-external", daemon=True)

    @property
    def address(self) -> tuple[str, int]:
        return self.sock.getsockname()

    def start(self) -> None:
        self.timers.start()
        self._thread.start()

    def close(self) -> None:
        self.stopping.set()
        self.timers.stop()
        if self._thread.is_alive():
            self._thread.join(timeout=2)
        self.sock.close()

    def _send(self, addr, msg_kwargs: dict, dst: int) -> None:
        with self.lock:
            seq = self.nonces.next()
        msg = WireMessage(sender_id=EXTERNAL_ID, seq=seq, **msg_kwargs)
        try:
            self.sock.sendto(encode(msg, self.keys[dst]), addr)
        except OSError:
            pass

    def _serve(self) -> None:
        while not self.stopping.is_set():
            try:
                data, addr = self.sock.recvfrom(2048)
            except socket.timeout:
                continue
            except OSError:
                return
            arrived = time.monotonic_ns()
            try:
                with self.lock:
                    msg = decode(data, self.keys, self.window)
            except WireError:
                continue
            if msg.msg_type is MsgType.EXT_REQUEST:
                self.requests += 1
                self._send(addr, dict(msg_type=MsgType.EXT_REPLY, echo_nonce=msg.nonce,
                                      nanos=self.clock(), epsilon_nanos=self.epsilon_nanos),
                           msg.sender_id)
            elif msg.msg_type is MsgType.CAL_REQUEST:
                self.timers.call_later(msg.pp_nanos, self._cal_reply, msg, addr, arrived)

    def _cal_reply(self, msg: WireMessage, addr, arrived: int) -> None:
        elapsed = time.monotonic_ns() - arrived
        self._send(addr, dict(msg_type=MsgType.CAL_REPLY, echo_nonce=msg.nonce,
                              elapsed_nanos=elapsed, nanos=self.clock()), msg.sender_id)


def serve_external(listen: tuple[str, int], keys: dict[int, bytes]) -> int:
    server = ExternalServer(listen, keys)
    stop = threading.Event()
    if threading.current_thread() is threading.main_thread():
        for sig in (signal.SIGTERM, signal.SIGINT):
            signal.signal(sig, lambda *_: stop.set())
    server.start()
    try:
        while not stop.wait(0.2):
            pass
    finally:
        server.close()
    return EXIT_CLEAN


def query_node(addr: tuple[str, int], client_id: int, key: bytes, node_id: int,
               timeout_s: float = 2.0) -> TrustedTimestamp:
    """Ask a running node for a timestamp over the wire.

    Raises :class:`~triad.wire.Timeout` when no answer arrives and
    ``RuntimeError`` when the node answers that it cannot serve.
    """
    counter = NonceCounter(client_id, time.time_ns())
    request = WireMessage(MsgType.TS_REQUEST, client_id, counter.next())
    window = ReplayWindow()
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as sock:
        sock.sendto(encode(request, key), addr)
        deadline = time.monotonic() + timeout_s
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise Timeout(f"no answer from {addr[0]}:{addr[1]}")
            sock.settimeout(remaining)
            try:
                data, _ = sock.recvfrom(2048)
            except socket.timeout:
                raise Timeout(f"no answer from {addr[0]}:{addr[1]}") from None
            try:
                reply = decode(data, {node_id: key}, window)
            except WireError:
                continue
            if reply.echo_nonce != request.nonce:
                continue
            if reply.msg_type is MsgType.FAILURE_REPLY:
                raise RuntimeError(f"node {node_id} unavailable ({FailureState(reply.failure_state).name})")
            return TrustedTimestamp(reply.nanos, Provenance.PEER, reply.epsilon_nanos, node_id)
