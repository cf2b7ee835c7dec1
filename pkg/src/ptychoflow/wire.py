"""Binary streaming protocol for frames, phase predictions and model deployments.

Every message on the wire is laid out little-endian as::

    b"PTY\\x01" | kind u8 | seq u64 | payload_len u32 | payload | crc32(payload) u32

Body layouts:

* FRAME   pos_index u32 | x_nm f64 | y_nm f64 | dim u32 | f32[dim*dim]
* PHASE   pos_index u32 | dim u32 | f32[dim*dim] | infer_micros u32
* MODEL   checkpoint_id u64 | blob_len u64 | blob | sha256(blob) 32B
* CONTROL UTF-8 JSON object (may be empty)
* ACK     UTF-8 JSON object
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import socket
import socketserver
import struct
import threading
import time
import zlib
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"PTY\x01"
HEADER = struct.Struct("<4sBQI")
TRAILER = struct.Struct("<I")
MAX_PAYLOAD = 256 * 1024 * 1024


class Kind(enum.IntEnum):
    FRAME = 1
    PHASE = 2
    MODEL = 3
    CONTROL = 4
    ACK = 5


class WireError(Exception):
    pass


class NeedMoreBytes(WireError):
    """The buffer holds only a prefix of a message."""


class ProtocolError(WireError):
    """Bad magic or out-of-order stream; fatal for the connection."""


class IntegrityError(WireError):
    """Payload checksum or digest mismatch."""


class UnsupportedError(WireError):
    """Unknown message kind."""


class SizeError(WireError):
    pass


class ConnectError(WireError):
    pass


@dataclass(frozen=True)
class Message:
    kind: Kind
    seq: int
    payload: bytes = b""

    def body(self):
        return _BODY_TYPES[self.kind].unpack(self.payload)


@dataclass(frozen=True)
class FrameBody:
    pos_index: int
    x_nm: float
    y_nm: float
    pixels: np.ndarray  # float32 (dim, dim) intensities

    _head = struct.Struct("<IddI")

    @property
    def dim(self) -> int:
        return self.pixels.shape[0]

    def pack(self) -> bytes:
        px = np.ascontiguousarray(self.pixels, dtype="<f4")
        if px.ndim != 2 or px.shape[0] != px.shape[1]:
            raise ValueError("frame pixels must be a square 2-D array")
        return self._head.pack(self.pos_index, self.x_nm, self.y_nm, px.shape[0]) + px.tobytes()

    @classmethod
    def unpack(cls, payload: bytes) -> FrameBody:
        pos, x, y, dim = cls._head.unpack_from(payload)
        n = dim * dim
        if len(payload) != cls._head.size + 4 * n:
            raise ProtocolError(f"FRAME payload of {len(payload)} bytes does not match dim={dim}")
        pixels = np.frombuffer(payload, dtype="<f4", count=n, offset=cls._head.size).reshape(dim, dim)
        return cls(pos, x, y, pixels.astype(np.float32))

    def __eq__(self, other):
        return isinstance(other, FrameBody) and self.pack() == other.pack()


@dataclass(frozen=True)
class PhaseBody:
    pos_index: int
    phases: np.ndarray  # float32 (dim, dim) radians
    infer_micros: int = 0

    @property
    def dim(self) -> int:
        return self.phases.shape[0]

    def pack(self) -> bytes:
        ph = np.ascontiguousarray(self.phases, dtype="<f4")
        return struct.pack("<II", self.pos_index, ph.shape[0]) + ph.tobytes() + struct.pack("<I", self.infer_micros)

    @classmethod
    def unpack(cls, payload: bytes) -> PhaseBody:
        pos, dim = struct.unpack_from("<II", payload)
        n = dim * dim
        if len(payload) != 12 + 4 * n:
            raise ProtocolError(f"PHASE payload of {len(payload)} bytes does not match dim={dim}")
        phases = np.frombuffer(payload, dtype="<f4", count=n, offset=8).reshape(dim, dim)
        (micros,) = struct.unpack_from("<I", payload, 8 + 4 * n)
        return cls(pos, phases.astype(np.float32), micros)

    def __eq__(self, other):
        return isinstance(other, PhaseBody) and self.pack() == other.pack()


@dataclass(frozen=True)
class ModelBody:
    checkpoint_id: int
    blob: bytes
    blob_sha256: bytes = b""

    def __post_init__(self):
        if not self.blob_sha256:
            object.__setattr__(self, "blob_sha256", hashlib.sha256(self.blob).digest())

    def verify(self) -> bool:
        return hashlib.sha256(self.blob).digest() == self.blob_sha256

    def pack(self) -> bytes:
        return struct.pack("<QQ", self.checkpoint_id, len(self.blob)) + self.blob + self.blob_sha256

    @classmethod
    def unpack(cls, payload: bytes) -> ModelBody:
        ckpt_id, n = struct.unpack_from("<QQ", payload)
        if len(payload) != 16 + n + 32:
            raise ProtocolError("MODEL payload length does not match blob_len")
        return cls(ckpt_id, bytes(payload[16 : 16 + n]), bytes(payload[16 + n :]))


class _JsonBody:
    @staticmethod
    def pack(obj: dict | None) -> bytes:
        return json.dumps(obj, sort_keys=True).encode() if obj else b""

    @staticmethod
    def unpack(payload: bytes) -> dict:
        return json.loads(payload.decode()) if payload else {}


_BODY_TYPES = {
    Kind.FRAME: FrameBody,
    Kind.PHASE: PhaseBody,
    Kind.MODEL: ModelBody,
    Kind.CONTROL: _JsonBody,
    Kind.ACK: _JsonBody,
}


def encode(msg: Message) -> bytes:
    payload = bytes(msg.payload)
    if len(payload) > MAX_PAYLOAD:
        raise SizeError(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    head = HEADER.pack(MAGIC, int(msg.kind), msg.seq, len(payload))
    return head + payload + TRAILER.pack(zlib.crc32(payload))


def decode_prefix(buf: bytes | bytearray | memoryview) -> tuple[Message, int]:
    """Decode the first message of ``buf``; returns it with the bytes consumed."""
    view = memoryview(buf)
    if len(view) < 4:
        if bytes(view) != MAGIC[: len(view)]:
            raise ProtocolError("bad magic")
        raise NeedMoreBytes()
    if bytes(view[:4]) != MAGIC:
        raise ProtocolError(f"bad magic {bytes(view[:4])!r}")
    if len(view) < HEADER.size:
        raise NeedMoreBytes()
    _, kind, seq, n = HEADER.unpack_from(view)
    if kind not in Kind._value2member_map_:
        raise UnsupportedError(f"unknown message kind {kind}")
    if n > MAX_PAYLOAD:
        raise SizeError(f"declared payload of {n} bytes exceeds {MAX_PAYLOAD}")
    total = HEADER.size + n + TRAILER.size
    if len(view) < total:
        raise NeedMoreBytes()
    payload = bytes(view[HEADER.size : HEADER.size + n])
    (crc,) = TRAILER.unpack_from(view, HEADER.size + n)
    if zlib.crc32(payload) != crc:
        raise IntegrityError(f"checksum mismatch on {Kind(kind).name} seq={seq}")
    return Message(Kind(kind), seq, payload), total


def decode(data: bytes) -> Message:
    """Decode exactly one message; trailing bytes are a protocol error."""
    msg, used = decode_prefix(data)
    if used != len(data):
        raise ProtocolError(f"{len(data) - used} trailing bytes after message")
    return msg


class StreamDecoder:
    """Incremental decoder; chunk boundaries do not affect the output."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, chunk: bytes) -> list[Message]:
        self._buf += chunk
        out = []
        while True:
            try:
                msg, used = decode_prefix(self._buf)
            except NeedMoreBytes:
                return out
            del self._buf[:used]
            out.append(msg)

    @property
    def pending(self) -> int:
        return len(self._buf)


def parse_addr(addr: str | tuple[str, int]) -> tuple[str, int]:
    if isinstance(addr, tuple):
        return addr
    host, _, port = addr.rpartition(":")
    if not host or not port:
        raise ValueError(f"address must be host:port, got {addr!r}")
    return host, int(port)


def format_addr(addr: tuple[str, int]) -> str:
    return f"{addr[0]}:{addr[1]}"


class Connection:
    """A framed message channel over one TCP socket.

    Outgoing messages are numbered from ``seq_start``; incoming sequence
    numbers must strictly increase.
    """

    def __init__(self, sock: socket.socket, seq_start: int = 0):
        self.sock = sock
        self._decoder = StreamDecoder()
        self._inbox: list[Message] = []
        self._next_seq = seq_start
        self._last_rx: int | None = None
        self._send_lock = threading.Lock()

    @classmethod
    def connect(cls, addr, timeout: float | None = 5.0) -> Connection:
        sock = socket.create_connection(parse_addr(addr), timeout=timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.settimeout(None)
        return cls(sock)

    def send(self, kind: Kind, payload: bytes = b"", seq: int | None = None) -> int:
        with self._send_lock:
            if seq is None:
                seq = self._next_seq
            if seq < self._next_seq:
                raise ProtocolError(f"seq {seq} would not increase (next is {self._next_seq})")
            self.sock.sendall(encode(Message(kind, seq, payload)))
            self._next_seq = seq + 1
            return seq

    def send_json(self, kind: Kind, obj: dict | None = None, seq: int | None = None) -> int:
        return self.send(kind, _JsonBody.pack(obj), seq)

    def recv(self, timeout: float | None = None) -> Message | None:
        """Next message, or None on orderly close; ``socket.timeout`` on timeout."""
        self.sock.settimeout(timeout)
        while not self._inbox:
            chunk = self.sock.recv(1 << 16)
            if not chunk:
                if self._decoder.pending:
                    raise ProtocolError("connection closed mid-message")
                return None
            self._inbox.extend(self._decoder.feed(chunk))
        msg = self._inbox.pop(0)
        if self._last_rx is not None and msg.seq <= self._last_rx:
            raise ProtocolError(f"sequence went from {self._last_rx} to {msg.seq}")
        self._last_rx = msg.seq
        return msg

    def request(self, kind: Kind, payload: bytes, timeout: float = 10.0) -> Message:
        self.send(kind, payload)
        reply = self.recv(timeout)
        if reply is None:
            raise ConnectError("peer closed before replying")
        return reply

    def close(self):
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class MessageServer:
    """Threaded TCP server handing each accepted connection to ``handler``."""

    def __init__(self, addr, handler: Callable[[Connection], None]):
        outer = self

        class _Handler(socketserver.BaseRequestHandler):
            def handle(self):
                self.request.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                conn = Connection(self.request)
                with outer._lock:
                    outer._conns.add(conn)
                try:
                    handler(conn)
                except (OSError, WireError) as exc:
                    log.debug("connection ended: %s", exc)
                finally:
                    with outer._lock:
                        outer._conns.discard(conn)

        class _Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self._lock = threading.Lock()
        self._conns: set[Connection] = set()
        self._server = _Server(parse_addr(addr), _Handler)  # raises OSError on bind failure
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> str:
        return format_addr(self._server.server_address[:2])

    def start(self) -> MessageServer:
        self._thread = threading.Thread(target=self._server.serve_forever, kwargs={"poll_interval": 0.05}, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self._server.shutdown()
        self._server.server_close()
        with self._lock:
            conns = list(self._conns)
        for c in conns:
            c.close()
        if self._thread:
            self._thread.join(timeout=5)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


@dataclass
class Subscription:
    """Handle for a reconnecting stream subscription (see :func:`subscribe`)."""

    addr: str
    on_message: Callable[[Message], None]
    request: dict = field(default_factory=lambda: {"op": "subscribe"})
    max_attempts: int = 5
    backoff_base: float = 0.1
    backoff_cap: float = 5.0
    events: list[tuple[float, str]] = field(default_factory=list)
    error: Exception | None = None
    last_seq: int | None = None

    def __post_init__(self):
        self._stop = threading.Event()
        self._done = threading.Event()
        self._cb_lock = threading.RLock()
        self._conn: Connection | None = None
        self._thread = threading.Thread(target=self._run, daemon=True, name=f"subscribe-{self.addr}")

    def _event(self, what: str):
        self.events.append((time.monotonic(), what))
        log.info("subscription %s: %s", self.addr, what)

    def _run(self):
        failures = 0
        connected_before = False
        try:
            while not self._stop.is_set():
                try:
                    conn = Connection.connect(self.addr)
                except OSError as exc:
                    failures += 1
                    if failures >= self.max_attempts:
                        self.error = ConnectError(f"{self.addr} unreachable after {failures} attempts: {exc}")
                        return
                    delay = min(self.backoff_cap, self.backoff_base * 2 ** (failures - 1))
                    self._stop.wait(delay)
                    continue
                failures = 0
                self._conn = conn
                self._event("reconnect" if connected_before else "connect")
                connected_before = True
                from_seq = 0 if self.last_seq is None else self.last_seq + 1
                reason = "closed by peer"
                try:
                    conn.send_json(Kind.CONTROL, {**self.request, "from_seq": from_seq})
                    if self._pump(conn):
                        self._event("end")
                        return
                except (OSError, WireError) as exc:
                    reason = str(exc)
                finally:
                    conn.close()
                    self._conn = None
                if not self._stop.is_set():
                    self._event(f"disconnect: {reason}")
        finally:
            self._done.set()

    def _pump(self, conn: Connection) -> bool:
        while not self._stop.is_set():
            msg = conn.recv()
            if msg is None:
                return False
            with self._cb_lock:
                if self._stop.is_set():
                    return False
                self.on_message(msg)
                self.last_seq = msg.seq
            if msg.kind == Kind.CONTROL and msg.body().get("op") == "end":
                return True
        return False

    def start(self) -> Subscription:
        self._thread.start()
        return self

    def wait(self, timeout: float | None = None) -> bool:
        """Block until the stream ends; raises the connect error if it gave up."""
        finished = self._done.wait(timeout)
        if self.error is not None:
            raise self.error
        return finished

    @property
    def done(self) -> bool:
        return self._done.is_set()

    def close(self):
        """Stop delivery; no callback runs after this returns."""
        self._stop.set()
        conn = self._conn
        if conn is not None:
            conn.close()
        if threading.current_thread() is not self._thread:
            with self._cb_lock:
                pass
            self._thread.join(timeout=5)

    @property
    def reconnects(self) -> int:
        return sum(1 for _, e in self.events if e == "reconnect")


def subscribe(addr: str, on_message: Callable[[Message], None], **kwargs) -> Subscription:
    """Subscribe to a stream server; messages reach ``on_message`` in arrival order.

    Reconnects with capped exponential backoff (0.1 s * 2**k, cap 5 s),
    resuming after the last delivered sequence number.
    """
    return Subscription(addr, on_message, **kwargs).start()
