"""Authenticated-encrypted datagrams for peer, calibration and external traffic.

Layout (big-endian)::

    [0]      version
    [1]      msg_type
    [2:6]    sender_id
    [6:18]   nonce = sender_id (4 bytes) || counter (8 bytes)
    [18:26]  seq (equals the nonce counter)
    [26:]    AES-GCM-256 ciphertext || 16-byte tag

The whole 26-byte header is the associated data. Replies echo the request
nonce inside the encrypted payload.
"""

from __future__ import annotations

import enum
import socket
import struct
import time
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .core import (
    OffEnclaveInterval,
    Provenance,
    RttEstimate,
    TrustedTimestamp,
    compute_error_bound,
)

VERSION = 1
HEADER_LEN = 26
TAG_LEN = 16
NONCE_LEN = 12
KEY_LEN = 32
MIN_DATAGRAM = HEADER_LEN + TAG_LEN
COUNTER_MAX = (1 << 64) - 1
DEFAULT_WINDOW = 4096
EXTERNAL_ID = 0

_HEADER = struct.Struct(">BBI12sQ")
_U64 = struct.Struct(">Q")
_TS_BODY = struct.Struct(">12sQQ")
_CAL_REPLY = struct.Struct(">12sQQ")


class MsgType(enum.IntEnum):
    TS_REQUEST = 1
    TS_REPLY = 2
    FAILURE_REPLY = 3
    CAL_REQUEST = 4
    CAL_REPLY = 5
    EXT_REQUEST = 6
    EXT_REPLY = 7


class FailureState(enum.IntEnum):
    """Why a peer could not answer; drives who falls back to the external source."""

    UNAVAILABLE = 0  # bootstrapping, terminated, or otherwise not contending
    UNTAINTING = 1  # running its own peer cycle
    EXTERNAL = 2  # already fetching from the external source


class WireError(Exception):
    """Base for decode failures; the node layer drops these silently."""


class Malformed(WireError):
    pass


class VersionMismatch(WireError):
    pass


class AuthFailed(WireError):
    pass


class ReplayDetected(WireError):
    pass


class NonceExhausted(WireError):
    pass


class Timeout(WireError):
    pass


@dataclass(frozen=True)
class WireMessage:
    """One decoded datagram. Unused typed fields stay ``None``."""

    msg_type: MsgType
    sender_id: int
    seq: int
    nonce: bytes = b""
    version: int = VERSION
    echo_nonce: bytes | None = None
    nanos: int | None = None
    epsilon_nanos: int | None = None
    pp_nanos: int | None = None
    elapsed_nanos: int | None = None
    failure_state: FailureState | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "msg_type", MsgType(self.msg_type))
        if not self.nonce:
            object.__setattr__(self, "nonce", make_nonce(self.sender_id, self.seq))


def make_nonce(sender_id: int, counter: int) -> bytes:
    return struct.pack(">IQ", sender_id, counter)


def _payload(msg: WireMessage) -> bytes:
    t = msg.msg_type
    try:
        if t in (MsgType.TS_REQUEST, MsgType.EXT_REQUEST):
            return b""
        if t in (MsgType.TS_REPLY, MsgType.EXT_REPLY):
            return _TS_BODY.pack(msg.echo_nonce, msg.nanos, msg.epsilon_nanos)
        if t is MsgType.FAILURE_REPLY:
            return msg.echo_nonce + bytes([int(msg.failure_state)])
        if t is MsgType.CAL_REQUEST:
            return _U64.pack(msg.pp_nanos)
        if t is MsgType.CAL_REPLY:
            return _CAL_REPLY.pack(msg.echo_nonce, msg.elapsed_nanos, msg.nanos)
    except (struct.error, TypeError) as exc:
        raise ValueError(f"incomplete fields for {t.name}: {exc}") from None
    raise ValueError(f"unknown message type {t}")


def _parse(t: MsgType, header: dict, body: bytes) -> WireMessage:
    try:
        if t in (MsgType.TS_REQUEST, MsgType.EXT_REQUEST):
            if body:
                raise Malformed("request carries a payload")
            return WireMessage(t, **header)
        if t in (MsgType.TS_REPLY, MsgType.EXT_REPLY):
            echo, nanos, eps = _TS_BODY.unpack(body)
            return WireMessage(t, **header, echo_nonce=echo, nanos=nanos, epsilon_nanos=eps)
        if t is MsgType.FAILURE_REPLY:
            if len(body) != NONCE_LEN + 1:
                raise Malformed("bad failure reply length")
            return WireMessage(t, **header, echo_nonce=body[:NONCE_LEN],
                               failure_state=FailureState(body[NONCE_LEN]))
        if t is MsgType.CAL_REQUEST:
            (pp,) = _U64.unpack(body)
            return WireMessage(t, **header, pp_nanos=pp)
        echo, elapsed, nanos = _CAL_REPLY.unpack(body)
        return WireMessage(t, **header, echo_nonce=echo, elapsed_nanos=elapsed, nanos=nanos)
    except (struct.error, ValueError) as exc:
        if isinstance(exc, Malformed):
            raise
        raise Malformed(f"bad {t.name} payload: {exc}") from None


def encode(msg: WireMessage, key: bytes) -> bytes:
    if len(key) != KEY_LEN:
        raise ValueError("AES-GCM-256 needs a 32-byte key")
    if msg.seq >= COUNTER_MAX:
        raise NonceExhausted(f"sender {msg.sender_id} exhausted its nonce space")
    if len(msg.nonce) != NONCE_LEN:
        raise ValueError("nonce must be 12 bytes")
    header = _HEADER.pack(msg.version, int(msg.msg_type), msg.sender_id, msg.nonce, msg.seq)
    return header + AESGCM(key).encrypt(msg.nonce, _payload(msg), header)


def peek_header(datagram: bytes) -> tuple[int, int, int] | None:
    """Cleartext ``(msg_type, sender_id, seq)`` as an on-path observer sees it."""
    if len(datagram) < HEADER_LEN:
        return None
    _, t, sender, _, seq = _HEADER.unpack_from(datagram)
    return t, sender, seq


class ReplayWindow:
    """Per-sender sliding window over sequence numbers.

    A sequence number is accepted once; anything at or below
    ``highest - size`` is rejected as stale.
    """

    def __init__(self, size: int = DEFAULT_WINDOW):
        if size < 1:
            raise ValueError("window size must be positive")
        self.size = size
        self._highest: dict[int, int] = {}
        self._bits: dict[int, int] = {}

    def check(self, sender: int, seq: int) -> None:
        top = self._highest.get(sender)
        if top is None or seq > top:
            return
        offset = top - seq
        if offset >= self.size or (self._bits[sender] >> offset) & 1:
            raise ReplayDetected(f"sender {sender} seq {seq}")

    def accept(self, sender: int, seq: int) -> None:
        self.check(sender, seq)
        top = self._highest.get(sender)
        if top is None:
            self._highest[sender] = seq
            self._bits[sender] = 1
        elif seq > top:
            shift = seq - top
            bits = (self._bits[sender] << shift) | 1 if shift < self.size else 1
            self._bits[sender] = bits & ((1 << self.size) - 1)
            self._highest[sender] = seq
        else:
            self._bits[sender] |= 1 << (top - seq)


def decode(datagram: bytes, keys: dict[int, bytes] | bytes, window: ReplayWindow | None) -> WireMessage:
    """Authenticate, version-check and replay-check one datagram.

    ``keys`` is either a single key or a mapping from sender id to key.
    The window is only updated for messages that pass every check.
    """
    if not isinstance(datagram, (bytes, bytearray, memoryview)):
        raise Malformed("datagram must be bytes")
    datagram = bytes(datagram)
    if len(datagram) < MIN_DATAGRAM:
        raise Malformed(f"datagram too short ({len(datagram)} bytes)")
    version, t, sender, nonce, seq = _HEADER.unpack_from(datagram)
    if version != VERSION:
        raise VersionMismatch(f"version {version}")
    try:
        mtype = MsgType(t)
    except ValueError:
        raise Malformed(f"unknown message type {t}") from None
    if nonce != make_nonce(sender, seq):
        raise Malformed("nonce does not match sender and sequence")
    key = keys.get(sender) if isinstance(keys, dict) else keys
    if key is None:
        raise AuthFailed(f"no key for sender {sender}")
    header = datagram[:HEADER_LEN]
    try:
        body = AESGCM(key).decrypt(nonce, datagram[HEADER_LEN:], header)
    except InvalidTag:
        raise AuthFailed("tag mismatch") from None
    if window is not None:
        window.check(sender, seq)
    msg = _parse(mtype, {"sender_id": sender, "seq": seq, "nonce": nonce, "version": version}, body)
    if window is not None:
        window.accept(sender, seq)
    return msg


@dataclass
class NonceCounter:
    """Monotone per-sender counter; the nonce is ``sender_id || counter``."""

    sender_id: int
    value: int = 0

    def next(self) -> int:
        if self.value >= COUNTER_MAX - 1:
            raise NonceExhausted(f"sender {self.sender_id} exhausted its nonce space")
        self.value += 1
        return self.value


@dataclass
class Endpoint:
    host: str
    port: int
    key: bytes
    sender_id: int = EXTERNAL_ID


@dataclass
class ExternalClient:
    """Blocking client for the external time service over UDP."""

    client_id: int
    endpoint: Endpoint
    timeout_s: float = 1.0
    counter: NonceCounter = field(init=False)
    window: ReplayWindow = field(default_factory=ReplayWindow)

    def __post_init__(self) -> None:
        # wall-clock seeded so restarts never reuse a nonce
        self.counter = NonceCounter(self.client_id, time.time_ns())

    def fetch(self) -> tuple[TrustedTimestamp, RttEstimate]:
        return external_fetch(self.endpoint, self.client_id, self.counter, self.window, self.timeout_s)


def external_fetch(endpoint: Endpoint, client_id: int, counter: NonceCounter,
                   window: ReplayWindow, timeout_s: float = 1.0,
                   clock=time.perf_counter_ns) -> tuple[TrustedTimestamp, RttEstimate]:
    """One ExtRequest/ExtReply exchange. The value is midpoint-corrected and
    its bound is the full measured round trip plus the source's own bound."""
    seq = counter.next()
    request = WireMessage(MsgType.EXT_REQUEST, client_id, seq)
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    try:
        sock.settimeout(timeout_s)
        sent = clock()
        sock.sendto(encode(request, endpoint.key), (endpoint.host, endpoint.port))
        deadline = sent + int(timeout_s * 1e9)
        while True:
            remaining = deadline - clock()
            if remaining <= 0:
                raise Timeout(f"no reply from {endpoint.host}:{endpoint.port}")
            sock.settimeout(remaining / 1e9)
            try:
                data, _ = sock.recvfrom(2048)
            except socket.timeout:
                raise Timeout(f"no reply from {endpoint.host}:{endpoint.port}") from None
            received = clock()
            try:
                reply = decode(data, {endpoint.sender_id: endpoint.key}, window)
            except WireError:
                continue
            if reply.msg_type is MsgType.EXT_REPLY and reply.echo_nonce == request.nonce:
                break
    finally:
        sock.close()
    rtt = RttEstimate(received - sent)
    eps = compute_error_bound(OffEnclaveInterval(reply.epsilon_nanos), rtt)
    return TrustedTimestamp(reply.nanos + rtt.reading_error_nanos, Provenance.EXTERNAL, eps), rtt
