"""Wire envelope plus an in-memory simulated network and a TCP transport.

Frame layout (integers big-endian)::

    u32 length of everything that follows
    u16 version | 16-byte session id | u8 sender role | u16 sender bank index
    u8 message type | u32 payload length | payload

Ring vectors inside payloads stay little-endian.
"""
from __future__ import annotations

import enum
import heapq
import json
import queue
import socket
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

PROTOCOL_VERSION = 1
SID_BYTES = 16
MAX_PAYLOAD = 64 << 20
_HEADER = struct.Struct(">H16sBHBI")
HEADER_BYTES = 4 + _HEADER.size


class TransportError(Exception):
    pass


class FrameError(TransportError, ValueError):
    pass


class TruncatedFrameError(FrameError):
    pass


class VersionMismatchError(FrameError):
    pass


class FrameTooLargeError(FrameError):
    pass


class UnknownMessageTypeError(FrameError):
    pass


class MalformedFrameError(FrameError):
    pass


class UnknownPartyError(TransportError, KeyError):
    pass


class MsgType(enum.IntEnum):
    OT_MSG1 = 1
    OT_MSG2 = 2
    OT_MSG3 = 3
    MASKED_PAIR = 4
    SHARE_FORWARD = 5
    AGGREGATE_SHARE = 6
    INFER_REQUEST = 7
    INFER_SHARE = 8
    CONTROL = 9


class Role(enum.IntEnum):
    HUB = 0
    AGGREGATOR = 1
    BANK = 2


@dataclass(frozen=True, order=True)
class PartyId:
    role: Role
    index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "role", Role(self.role))
        if self.role != Role.BANK and self.index != 0:
            raise ValueError("only banks carry an index")
        if not 0 <= self.index < 1 << 16:
            raise ValueError("bank index must fit in u16")

    def __str__(self) -> str:
        if self.role == Role.BANK:
            return f"bank:{self.index}"
        return self.role.name.lower()

    @classmethod
    def parse(cls, text: str) -> PartyId:
        text = text.strip().lower()
        if text == "hub":
            return HUB
        if text == "aggregator":
            return AGGREGATOR
        role, _, idx = text.partition(":")
        if role == "bank" and idx.isdigit():
            return cls(Role.BANK, int(idx))
        raise ValueError(f"unknown party {text!r}")


HUB = PartyId(Role.HUB)
AGGREGATOR = PartyId(Role.AGGREGATOR)


def bank(i: int) -> PartyId:
    return PartyId(Role.BANK, i)


@dataclass(frozen=True)
class ProtocolMessage:
    sid: bytes
    sender: PartyId
    type: MsgType
    payload: bytes = b""
    version: int = PROTOCOL_VERSION

    def __post_init__(self):
        if len(self.sid) != SID_BYTES:
            raise ValueError(f"session id must be {SID_BYTES} bytes")


def encode_frame(msg: ProtocolMessage, max_payload: int = MAX_PAYLOAD) -> bytes:
    if len(msg.payload) > max_payload:
        raise FrameTooLargeError(f"payload of {len(msg.payload)} bytes exceeds {max_payload}")
    body = _HEADER.pack(msg.version, msg.sid, int(msg.sender.role), msg.sender.index,
                        int(msg.type), len(msg.payload))
    return b"".join((struct.pack(">I", len(body) + len(msg.payload)), body, msg.payload))


def frame_length(prefix: bytes, max_payload: int = MAX_PAYLOAD) -> int:
    """Total frame size announced by the 4-byte prefix (prefix included)."""
    if len(prefix) < 4:
        raise TruncatedFrameError("need 4 bytes of length prefix")
    (n,) = struct.unpack_from(">I", prefix)
    if n < _HEADER.size:
        raise MalformedFrameError(f"declared length {n} shorter than header")
    if n - _HEADER.size > max_payload:
        raise FrameTooLargeError(f"declared length {n} too large")
    return 4 + n


def decode_frame(data: bytes, max_payload: int = MAX_PAYLOAD, copy: bool = True) -> ProtocolMessage:
    """Parse one complete frame. With ``copy=False`` the payload is a view into ``data``."""
    total = frame_length(data, max_payload)
    if len(data) < total:
        raise TruncatedFrameError(f"frame needs {total} bytes, have {len(data)}")
    if len(data) > total:
        raise MalformedFrameError(f"{len(data) - total} trailing bytes after frame")
    version, sid, role, index, mtype, plen = _HEADER.unpack_from(data, 4)
    if version != PROTOCOL_VERSION:
        raise VersionMismatchError(f"frame version {version}, expected {PROTOCOL_VERSION}")
    if plen != total - HEADER_BYTES:
        raise MalformedFrameError("payload length disagrees with frame length")
    try:
        mtype = MsgType(mtype)
    except ValueError:
        raise UnknownMessageTypeError(f"unknown message type {mtype}") from None
    try:
        sender = PartyId(Role(role), index)
    except ValueError as exc:
        raise MalformedFrameError(f"bad sender: {exc}") from None
    payload = memoryview(data)[HEADER_BYTES:]
    return ProtocolMessage(sid, sender, mtype, bytes(payload) if copy else payload, version)


# payload codec: u32 meta length | JSON meta | u32 part count | (u64 length | bytes)*

def pack_payload(meta: dict | None = None, parts: Iterable[bytes] = ()) -> bytes:
    blob = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode()
    parts = list(parts)
    chunks = [struct.pack(">I", len(blob)), blob, struct.pack(">I", len(parts))]
    for p in parts:
        view = memoryview(p).cast("B")
        chunks.append(struct.pack(">Q", view.nbytes))
        chunks.append(view)
    return b"".join(chunks)


def unpack_payload(data: bytes) -> tuple[dict, list[memoryview]]:
    view = memoryview(data)
    try:
        (n,) = struct.unpack_from(">I", view)
        meta = json.loads(bytes(view[4:4 + n]))
        if len(view) < 4 + n:
            raise ValueError
        off = 4 + n
        (count,) = struct.unpack_from(">I", view, off)
        off += 4
        parts = []
        for _ in range(count):
            (ln,) = struct.unpack_from(">Q", view, off)
            off += 8
            if off + ln > len(view):
                raise ValueError
            parts.append(view[off:off + ln])
            off += ln
    except (struct.error, ValueError, UnicodeDecodeError):
        raise MalformedFrameError("bad payload encoding") from None
    if off != len(view) or not isinstance(meta, dict):
        raise MalformedFrameError("bad payload encoding")
    return meta, parts


def u64_array(part) -> np.ndarray:
    if len(part) % 8:
        raise MalformedFrameError("ring vector length not a multiple of 8")
    return np.frombuffer(part, dtype="<u8").astype(np.uint64, copy=False)


@dataclass
class Counters:
    bytes_sent: dict = field(default_factory=dict)
    frames_sent: dict = field(default_factory=dict)

    def record(self, src: PartyId, dst: PartyId, nbytes: int) -> None:
        key = (str(src), str(dst))
        self.bytes_sent[key] = self.bytes_sent.get(key, 0) + nbytes
        self.frames_sent[key] = self.frames_sent.get(key, 0) + 1

    @property
    def total_bytes(self) -> int:
        return sum(self.bytes_sent.values())

    @property
    def total_frames(self) -> int:
        return sum(self.frames_sent.values())

    def by_party(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {}
        for (src, dst), n in self.bytes_sent.items():
            out.setdefault(src, {"sent": 0, "received": 0})["sent"] += n
            out.setdefault(dst, {"sent": 0, "received": 0})["received"] += n
        return dict(sorted(out.items()))

    def to_json(self) -> dict:
        return {
            "total_bytes": self.total_bytes,
            "total_frames": self.total_frames,
            "per_party": self.by_party(),
            "per_link": [{"src": s, "dst": d, "bytes": n, "frames": self.frames_sent[(s, d)]}
                         for (s, d), n in sorted(self.bytes_sent.items())],
        }


class SimNetwork:
    """Deterministic in-memory network driving reactive parties.

    A party is any object with ``start() -> iterable`` and ``handle(msg) ->
    iterable`` yielding ``(destination, ProtocolMessage)``. Every message is
    encoded to a frame and decoded on delivery. Each directed pair is a FIFO;
    which nonempty pair delivers next is picked by a seeded generator, or by
    the earliest arrival time if ``latency`` is set (seconds per frame plus
    seconds per byte).

    Party outputs are pulled one message at a time while fewer than
    ``window`` bytes are queued, so several links are usually in flight (and
    the seed decides their interleaving) while a party streaming a large
    batch as a lazy generator never has the whole batch in memory.
    """

    def __init__(self, parties: dict[PartyId, object], seed: int = 0,
                 latency: tuple[float, float] | None = None, max_payload: int = MAX_PAYLOAD,
                 window: int = 16 << 20):
        self.parties = dict(parties)
        self.window = window
        self._queued_bytes = 0
        self.counters = Counters()
        self.max_payload = max_payload
        self._rng = np.random.default_rng(seed)
        self._latency = latency
        self._clock = 0.0
        self._queues: dict[tuple[PartyId, PartyId], deque] = {}
        self._pending: list = []  # stack of (sender, iterator)
        self._events: list = []
        self._seq = 0
        self.delivered = 0
        self.log: list[tuple[str, str, str, int]] | None = None

    def _emit(self, src: PartyId, outputs) -> None:
        if outputs is None:
            return
        self._pending.append((src, iter(outputs)))

    def _send(self, src: PartyId, dst: PartyId, msg: ProtocolMessage) -> None:
        if dst not in self.parties:
            raise UnknownPartyError(f"no party {dst}")
        if msg.sender != src:
            raise TransportError(f"{src} tried to send as {msg.sender}")
        frame = encode_frame(msg, self.max_payload)
        self.counters.record(src, dst, len(frame))
        self._queued_bytes += len(frame)
        if self._latency is None:
            self._queues.setdefault((src, dst), deque()).append(frame)
        else:
            per_frame, per_byte = self._latency
            q = self._queues.setdefault((src, dst), deque())
            # per-pair FIFO: arrival never earlier than the previous frame on the link
            last = q[-1][0] if q else self._clock
            arrival = max(last, self._clock + per_frame + per_byte * len(frame))
            q.append((arrival, frame))
            self._seq += 1
            heapq.heappush(self._events, (arrival, self._seq, (src, dst)))

    def _pull_one(self) -> bool:
        while self._pending:
            src, it = self._pending[-1]
            try:
                dst, msg = next(it)
            except StopIteration:
                self._pending.pop()
                continue
            self._send(src, dst, msg)
            return True
        return False

    def _next_link(self):
        if self._latency is not None:
            arrival, _, link = heapq.heappop(self._events)
            self._clock = arrival
            return link
        links = [k for k, q in self._queues.items() if q]
        if not links:
            return None
        links.sort()
        return links[int(self._rng.integers(len(links)))]

    def _has_queued(self) -> bool:
        return any(self._queues.values())

    def run(self, start: Iterable[PartyId] | None = None, max_steps: int | None = None) -> int:
        for pid in (start if start is not None else self.parties):
            self._emit(pid, self.parties[pid].start())
        steps = 0
        while True:
            while (self._queued_bytes < self.window or not self._has_queued()) and self._pull_one():
                pass
            if not self._has_queued():
                break
            link = self._next_link()
            q = self._queues[link]
            item = q.popleft()
            frame = item if self._latency is None else item[1]
            self._queued_bytes -= len(frame)
            msg = decode_frame(frame, self.max_payload, copy=False)
            src, dst = link
            if self.log is not None:
                self.log.append((str(src), str(dst), msg.type.name, len(frame)))
            self.delivered += 1
            self._emit(dst, self.parties[dst].handle(msg))
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        return steps


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            raise TransportError("peer closed the connection")
        buf.extend(chunk)
    return bytes(buf)


class TcpEndpoint:
    """Blocking TCP endpoint for one party.

    ``addresses`` maps every party to ``(host, port)``. The endpoint listens
    on its own address; reader threads decode incoming frames into one inbox
    queue. Outgoing connections are opened lazily and kept per destination,
    which keeps each directed pair FIFO.
    """

    def __init__(self, me: PartyId, addresses: dict[PartyId, tuple[str, int]],
                 timeout: float = 30.0, max_payload: int = MAX_PAYLOAD,
                 connect_timeout: float = 10.0):
        self.me = me
        self.addresses = dict(addresses)
        self.timeout = timeout
        self.connect_timeout = connect_timeout
        self.max_payload = max_payload
        self.counters = Counters()
        self._inbox: queue.Queue = queue.Queue()
        self._out: dict[PartyId, socket.socket] = {}
        self._lock = threading.Lock()
        self._closed = threading.Event()
        self._conns: list[socket.socket] = []
        host, port = self.addresses[me]
        self._server = socket.create_server((host, port), reuse_port=False)
        self.port = self._server.getsockname()[1]
        self.addresses[me] = (host, self.port)
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()

    def _accept_loop(self):
        while not self._closed.is_set():
            try:
                conn, _ = self._server.accept()
            except OSError:
                return
            self._conns.append(conn)
            threading.Thread(target=self._read_loop, args=(conn,), daemon=True).start()

    def _read_loop(self, conn: socket.socket):
        try:
            while True:
                try:
                    prefix = _recv_exact(conn, 4)
                except TransportError:
                    if not self._closed.is_set():
                        self._inbox.put(TransportError("peer closed the connection"))
                    return
                total = frame_length(prefix, self.max_payload)
                buf = bytearray(prefix)
                buf += _recv_exact(conn, total - 4)
                self._inbox.put(decode_frame(bytes(buf), self.max_payload, copy=False))
        except (TransportError, OSError) as exc:
            if not self._closed.is_set():
                self._inbox.put(exc if isinstance(exc, TransportError) else TransportError(str(exc)))

    def _connect(self, dst: PartyId) -> socket.socket:
        # peers started as separate processes may not be listening yet
        deadline = time.monotonic() + self.connect_timeout
        while True:
            try:
                return socket.create_connection(self.addresses[dst], timeout=self.connect_timeout)
            except ConnectionRefusedError as exc:
                if time.monotonic() >= deadline:
                    raise TransportError(f"connect to {dst} failed: {exc}") from exc
                time.sleep(0.05)
            except OSError as exc:
                raise TransportError(f"connect to {dst} failed: {exc}") from exc

    def _conn_to(self, dst: PartyId) -> socket.socket:
        with self._lock:
            sock = self._out.get(dst)
            if sock is None:
                if dst not in self.addresses:
                    raise UnknownPartyError(f"no address for {dst}")
                sock = self._connect(dst)
                sock.settimeout(self.timeout)
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                self._out[dst] = sock
            return sock

    def send(self, dst: PartyId, msg: ProtocolMessage) -> None:
        frame = encode_frame(msg, self.max_payload)
        sock = self._conn_to(dst)
        try:
            sock.sendall(frame)
        except OSError as exc:
            raise TransportError(f"send to {dst} failed: {exc}") from exc
        self.counters.record(self.me, dst, len(frame))

    def recv(self, timeout: float | None = None) -> ProtocolMessage:
        try:
            item = self._inbox.get(timeout=self.timeout if timeout is None else timeout)
        except queue.Empty:
            raise TransportError(f"{self.me}: receive timed out") from None
        if isinstance(item, Exception):
            raise item
        return item

    def close(self) -> None:
        self._closed.set()
        try:
            self._server.close()
        except OSError:
            pass
        for sock in list(self._out.values()) + self._conns:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def run_party_tcp(party, endpoint: TcpEndpoint) -> None:
    """Drive one reactive party over TCP until it reports ``done``."""
    def flush(outputs):
        if outputs is None:
            return
        for dst, msg in outputs:
            endpoint.send(dst, msg)

    flush(party.start())
    while not getattr(party, "done", False):
        flush(party.handle(endpoint.recv()))
