"""Device wire protocol and the UDP receiving client.

Every datagram is one UTF-8 JSON object, at most 512 bytes, no newlines::

    sample     {"ts":<int>,"eye":"left"|"right","pd":<number>,"s":<int>,"seq":<int>}
    keepalive  {"type":"live.data","key":<string>,"op":"start"|"stop"}
    announce   {"type":"announce","id":<string>,"rate":<number>}

``ts`` is the device monotonic clock in microseconds, ``pd`` the pupil
diameter in millimetres, ``s`` a status word (0 = valid) and ``seq`` an
unsigned 32-bit counter that wraps.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import queue
import socket
import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Callable, Iterator, Union

log = logging.getLogger(__name__)

MAX_DATAGRAM_BYTES = 512
SEQ_MODULUS = 2**32
KEEPALIVE_TYPE = "live.data"
ANNOUNCE_TYPE = "announce"


class Eye(str, enum.Enum):
    LEFT = "left"
    RIGHT = "right"


class KeepaliveOp(str, enum.Enum):
    START = "start"
    STOP = "stop"


@dataclass(frozen=True)
class PupilSample:
    ts: int
    eye: Eye
    diameter: float
    status: int = 0
    seq: int = 0

    @property
    def valid(self) -> bool:
        return self.status == 0


@dataclass(frozen=True)
class Keepalive:
    key: str
    op: KeepaliveOp = KeepaliveOp.START


@dataclass(frozen=True)
class Announce:
    device_id: str
    sample_rate_hz: float


Datagram = Union[PupilSample, Keepalive, Announce]


class ProtocolError(ValueError):
    """A datagram that does not match any schema.

    ``reason`` is one of ``malformed_json``, ``unknown_type``,
    ``missing_field`` or ``bad_value``.
    """

    REASONS = ("malformed_json", "unknown_type", "missing_field", "bad_value")

    def __init__(self, reason: str, detail: str = ""):
        assert reason in self.REASONS
        self.reason = reason
        self.detail = detail
        super().__init__(f"{reason}: {detail}" if detail else reason)


@dataclass(frozen=True)
class DeviceEndpoint:
    address: str
    port: int
    keepalive_interval: float = 1.0

    def __post_init__(self):
        if not 1 <= self.port <= 65535:
            raise ValueError(f"port out of range: {self.port}")
        if not self.keepalive_interval > 0:
            raise ValueError("keepalive_interval must be positive")

    @classmethod
    def parse(cls, text: str, **kwargs) -> "DeviceEndpoint":
        """Parse ``host:port``."""
        host, sep, port = text.rpartition(":")
        if not sep or not host:
            raise ValueError(f"expected host:port, got {text!r}")
        return cls(host, int(port), **kwargs)

    def __str__(self) -> str:
        return f"{self.address}:{self.port}"


# -- parsing -----------------------------------------------------------------

_SAMPLE_KEYS = frozenset(("ts", "eye", "pd", "s", "seq"))
_KEEPALIVE_KEYS = frozenset(("type", "key", "op"))
_ANNOUNCE_KEYS = frozenset(("type", "id", "rate"))


def _reject_constant(name: str):
    raise ValueError(f"non-finite constant {name}")


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_number(v) -> bool:
    return (isinstance(v, (int, float)) and not isinstance(v, bool)
            and math.isfinite(v))


def _check_keys(obj: dict, expected: frozenset) -> None:
    missing = expected - obj.keys()
    if missing:
        raise ProtocolError("missing_field", ",".join(sorted(missing)))
    extra = obj.keys() - expected
    if extra:
        raise ProtocolError("bad_value", "unexpected field " + ",".join(sorted(extra)))


def parse_datagram(data: bytes) -> Datagram:
    """Decode one datagram; raises ProtocolError for anything else.

    Total over arbitrary input: every failure mode surfaces as ProtocolError.
    """
    if len(data) > MAX_DATAGRAM_BYTES:
        raise ProtocolError("bad_value", f"datagram exceeds {MAX_DATAGRAM_BYTES} bytes")
    try:
        obj = json.loads(data.decode("utf-8"), parse_constant=_reject_constant)
    except (UnicodeDecodeError, ValueError, RecursionError) as exc:
        raise ProtocolError("malformed_json", str(exc)) from None
    if not isinstance(obj, dict):
        raise ProtocolError("malformed_json", "top level is not an object")

    if "type" not in obj:
        return _parse_sample(obj)
    kind = obj["type"]
    if kind == KEEPALIVE_TYPE:
        _check_keys(obj, _KEEPALIVE_KEYS)
        if not isinstance(obj["key"], str):
            raise ProtocolError("bad_value", "key")
        try:
            op = KeepaliveOp(obj["op"])
        except (ValueError, TypeError):
            raise ProtocolError("bad_value", "op") from None
        return Keepalive(obj["key"], op)
    if kind == ANNOUNCE_TYPE:
        _check_keys(obj, _ANNOUNCE_KEYS)
        if not isinstance(obj["id"], str):
            raise ProtocolError("bad_value", "id")
        rate = obj["rate"]
        if not _is_number(rate) or rate <= 0:
            raise ProtocolError("bad_value", "rate")
        return Announce(obj["id"], float(rate))
    raise ProtocolError("unknown_type", repr(kind)[:40])


def _parse_sample(obj: dict) -> PupilSample:
    _check_keys(obj, _SAMPLE_KEYS)
    ts, eye, pd, status, seq = obj["ts"], obj["eye"], obj["pd"], obj["s"], obj["seq"]
    if not _is_int(ts) or ts < 0:
        raise ProtocolError("bad_value", "ts")
    try:
        eye = Eye(eye)
    except (ValueError, TypeError):
        raise ProtocolError("bad_value", "eye") from None
    if not _is_int(status):
        raise ProtocolError("bad_value", "s")
    if not _is_number(pd) or pd < 0 or (status == 0 and pd == 0):
        raise ProtocolError("bad_value", "pd")
    if not _is_int(seq) or not 0 <= seq < SEQ_MODULUS:
        raise ProtocolError("bad_value", "seq")
    return PupilSample(ts, eye, float(pd), status, seq)


def serialize_datagram(d: Datagram) -> bytes:
    if isinstance(d, PupilSample):
        obj = {"ts": d.ts, "eye": d.eye.value, "pd": float(d.diameter),
               "s": d.status, "seq": d.seq}
    elif isinstance(d, Keepalive):
        obj = {"type": KEEPALIVE_TYPE, "key": d.key, "op": d.op.value}
    elif isinstance(d, Announce):
        obj = {"type": ANNOUNCE_TYPE, "id": d.device_id, "rate": float(d.sample_rate_hz)}
    else:
        raise TypeError(f"not a datagram: {d!r}")
    # float repr is shortest round-trip, so diameters survive exactly
    return json.dumps(obj, separators=(",", ":"), allow_nan=False).encode("utf-8")


# -- receiving client --------------------------------------------------------

@dataclass
class StreamStats:
    datagrams: int = 0
    samples: int = 0
    errors: int = 0
    gaps: int = 0
    missing: int = 0
    error_reasons: dict = field(default_factory=dict)
    last_seq: int | None = None

    def note_seq(self, seq: int) -> None:
        if self.last_seq is not None:
            step = (seq - self.last_seq) % SEQ_MODULUS
            if step > 1:
                self.gaps += 1
                self.missing += step - 1
        self.last_seq = seq


class StreamError(RuntimeError):
    """Terminal failure of the receiving stream (unreachable device, socket error)."""


_END = object()


class StreamHandle:
    """A running subscription to a device.

    Two activities: the receiver thread reads datagrams, parses them and puts
    samples on a bounded queue; the dispatcher thread drains the queue in
    order and calls ``sink``. The stream ends on ``stop()``, after
    ``idle_timeout`` seconds without a datagram, or on a terminal error.
    """

    def __init__(self, endpoint: DeviceEndpoint, sink: Callable[[PupilSample], None], *,
                 idle_timeout: float | None = 5.0, queue_size: int = 65536,
                 key: str | None = None, on_end: Callable[[], None] | None = None):
        self.endpoint = endpoint
        self.sink = sink
        self.idle_timeout = idle_timeout
        self.key = key or uuid.uuid4().hex[:12]
        self.stats = StreamStats()
        self.error: BaseException | None = None
        self.announce: Announce | None = None
        self._on_end = on_end
        self._queue: queue.Queue = queue.Queue(maxsize=queue_size)
        self._stop = threading.Event()
        self._sock: socket.socket | None = None
        self._receiver = threading.Thread(target=self._receive, name="gazeload-recv", daemon=True)
        self._dispatcher = threading.Thread(target=self._dispatch, name="gazeload-sink", daemon=True)

    def start(self) -> "StreamHandle":
        try:
            infos = socket.getaddrinfo(self.endpoint.address, self.endpoint.port,
                                       type=socket.SOCK_DGRAM)
            family, _, _, _, addr = infos[0]
            sock = socket.socket(family, socket.SOCK_DGRAM)
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 4 * 1024 * 1024)
            sock.connect(addr)
        except OSError as exc:
            raise StreamError(f"cannot reach {self.endpoint}: {exc}") from exc
        self._sock = sock
        self._dispatcher.start()
        self._receiver.start()
        return self

    def _send_keepalive(self, op: KeepaliveOp) -> None:
        assert self._sock is not None
        self._sock.send(serialize_datagram(Keepalive(self.key, op)))

    def _receive(self) -> None:
        sock = self._sock
        interval = self.endpoint.keepalive_interval
        try:
            self._send_keepalive(KeepaliveOp.START)
            next_keepalive = time.monotonic() + interval
            last_data = time.monotonic()
            while not self._stop.is_set():
                now = time.monotonic()
                if now >= next_keepalive:
                    self._send_keepalive(KeepaliveOp.START)
                    next_keepalive = now + interval
                if self.idle_timeout is not None and now - last_data > self.idle_timeout:
                    log.info("no data for %.1f s, ending stream", self.idle_timeout)
                    break
                wait = next_keepalive - now
                if self.idle_timeout is not None:
                    wait = min(wait, last_data + self.idle_timeout - now)
                sock.settimeout(max(min(wait, 0.1), 0.001))
                try:
                    data = sock.recv(65535)
                except socket.timeout:
                    continue
                except ConnectionRefusedError:
                    if self.stats.datagrams == 0:
                        raise
                    log.info("device closed after %d datagrams, ending stream",
                             self.stats.datagrams)
                    break
                last_data = time.monotonic()
                self._handle(data)
        except OSError as exc:
            if not self._stop.is_set():
                self.error = StreamError(f"stream from {self.endpoint} failed: {exc}")
                log.error("%s", self.error)
        finally:
            try:
                self._send_keepalive(KeepaliveOp.STOP)
            except OSError:
                pass
            self._queue.put(_END)

    def _handle(self, data: bytes) -> None:
        stats = self.stats
        stats.datagrams += 1
        try:
            d = parse_datagram(data)
        except ProtocolError as exc:
            stats.errors += 1
            stats.error_reasons[exc.reason] = stats.error_reasons.get(exc.reason, 0) + 1
            return
        if isinstance(d, PupilSample):
            stats.samples += 1
            stats.note_seq(d.seq)
            self._queue.put(d)
        elif isinstance(d, Announce):
            self.announce = d

    def _dispatch(self) -> None:
        try:
            while True:
                item = self._queue.get()
                if item is _END:
                    break
                try:
                    self.sink(item)
                except Exception as exc:  # sink failure ends the stream
                    self.error = exc
                    self._stop.set()
                    log.exception("sink failed")
                    while self._queue.get() is not _END:
                        pass
                    break
        finally:
            if self._on_end is not None:
                self._on_end()

    def stop(self) -> None:
        self._stop.set()

    def join(self, timeout: float | None = None) -> None:
        self._receiver.join(timeout)
        self._dispatcher.join(timeout)
        if self._sock is not None and not self._receiver.is_alive():
            self._sock.close()

    @property
    def running(self) -> bool:
        return self._dispatcher.is_alive()

    def __enter__(self) -> "StreamHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.stop()
        self.join()


def receive_stream(endpoint: DeviceEndpoint, sink: Callable[[PupilSample], None],
                   **kwargs) -> StreamHandle:
    """Subscribe to ``endpoint`` and deliver parsed samples to ``sink`` in arrival order."""
    return StreamHandle(endpoint, sink, **kwargs).start()


def iter_samples(endpoint: DeviceEndpoint, **kwargs) -> Iterator[PupilSample]:
    """Blocking generator over a device stream; raises StreamError on terminal failure."""
    q: queue.Queue = queue.Queue()
    handle = receive_stream(endpoint, q.put, on_end=lambda: q.put(_END), **kwargs)
    try:
        while True:
            item = q.get()
            if item is _END:
                break
            yield item
    finally:
        handle.stop()
        handle.join()
    if handle.error is not None:
        raise handle.error
