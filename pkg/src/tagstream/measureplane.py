"""Measurement-plane wire protocol.

Framing: ``TTMP | version u8 | type u8 | body_len u32 LE | body``. A TT
agent advertises its capabilities on connect, accepts one measurement
request per connection, then streams encoded blocks in ascending
(abs_second, channel) order followed by END. The protocol never assumes
message boundaries from the transport; any reliable ordered byte stream
works (TCP in deployment, a socketpair in tests).
"""

from __future__ import annotations

import enum
import socket
import struct
import threading
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

from . import codec
from .ttagent import TagBlock

MAGIC = b"TTMP"
VERSION = 1

_FRAME = struct.Struct("<4sBBI")
FRAME_HEADER_SIZE = _FRAME.size

MAX_BODY_LEN = 64 * 1024 * 1024


class MsgType(enum.IntEnum):
    ADVERTISE = 1
    REQUEST = 2
    ACCEPT = 3
    DATA = 4
    END = 5
    ERROR = 6
    RATE = 7


class ErrorCode(enum.IntEnum):
    UNKNOWN_CHANNEL = 1
    MALFORMED_REQUEST = 2
    OVERRUN = 3
    VERSION_MISMATCH = 4
    INTERNAL = 5


class ProtocolError(Exception):
    """Malformed or out-of-contract traffic."""


class OrderingViolation(ProtocolError):
    """Server sent blocks out of the required (abs_second, channel) order."""


class RemoteError(ProtocolError):
    """Server answered with an ERROR message."""

    def __init__(self, code: ErrorCode, message: str):
        super().__init__(f"[{code.name}] {message}")
        self.code = code
        self.message = message


@dataclass(frozen=True)
class Message:
    type: int
    body: bytes = b""


def serialize(msg: Message) -> bytes:
    return _FRAME.pack(MAGIC, VERSION, msg.type, len(msg.body)) + msg.body


def parse(data: bytes) -> Message:
    """Parse exactly one frame from a buffer holding exactly one frame."""
    msg, consumed = parse_prefix(data)
    if msg is None or consumed != len(data):
        raise ProtocolError("buffer does not hold exactly one frame")
    return msg


def parse_prefix(data: bytes):
    """Try to parse one frame from the head of ``data``.

    Returns (Message, bytes_consumed) or (None, 0) when more bytes are needed.
    """
    if len(data) < FRAME_HEADER_SIZE:
        return None, 0
    magic, version, mtype, body_len = _FRAME.unpack_from(data)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}")
    if body_len > MAX_BODY_LEN:
        raise ProtocolError(f"body length {body_len} exceeds limit")
    if mtype not in MsgType._value2member_map_:
        raise ProtocolError(f"unknown message type {mtype}")
    end = FRAME_HEADER_SIZE + body_len
    if len(data) < end:
        return None, 0
    return Message(type=int(mtype), body=bytes(data[FRAME_HEADER_SIZE:end])), end


def _read_exact(stream, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = stream.read(remaining)
        if not chunk:
            raise ProtocolError("connection closed mid-frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_message(stream) -> Message:
    """Read one frame from a blocking file-like byte stream."""
    header = _read_exact(stream, FRAME_HEADER_SIZE)
    magic, version, mtype, body_len = _FRAME.unpack(header)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}")
    if body_len > MAX_BODY_LEN:
        raise ProtocolError(f"body length {body_len} exceeds limit")
    if mtype not in MsgType._value2member_map_:
        raise ProtocolError(f"unknown message type {mtype}")
    body = _read_exact(stream, body_len) if body_len else b""
    return Message(type=int(mtype), body=body)


# --- message bodies ---------------------------------------------------------

@dataclass(frozen=True)
class Advertisement:
    channels: tuple
    codecs: tuple = codec.KNOWN_CODECS
    resolution_ps: int = 1

    def pack(self) -> bytes:
        out = struct.pack("<H", len(self.channels))
        out += b"".join(struct.pack("<H", c) for c in self.channels)
        out += struct.pack("<B", len(self.codecs))
        out += bytes(self.codecs)
        out += struct.pack("<Q", self.resolution_ps)
        return out

    @classmethod
    def unpack(cls, body: bytes) -> "Advertisement":
        try:
            (n_ch,) = struct.unpack_from("<H", body, 0)
            pos = 2
            channels = struct.unpack_from(f"<{n_ch}H", body, pos)
            pos += 2 * n_ch
            (n_codecs,) = struct.unpack_from("<B", body, pos)
            pos += 1
            codecs = tuple(body[pos:pos + n_codecs])
            pos += n_codecs
            (resolution,) = struct.unpack_from("<Q", body, pos)
        except struct.error as exc:
            raise ProtocolError(f"bad ADVERTISE body: {exc}") from None
        return cls(channels=channels, codecs=codecs, resolution_ps=resolution)


@dataclass(frozen=True)
class MeasurementRequest:
    """Scope of a measurement; end_abs_second == 0 means live/open-ended."""

    start_abs_second: int
    end_abs_second: int
    channels: tuple
    codec_id: int = codec.DEFAULT_CODEC

    def validate(self):
        if not self.channels:
            raise ProtocolError("channel list must be non-empty")
        if self.end_abs_second != 0 and self.end_abs_second < self.start_abs_second:
            raise ProtocolError("end before start")

    def pack(self) -> bytes:
        self.validate()
        out = struct.pack("<QQH", self.start_abs_second, self.end_abs_second,
                          len(self.channels))
        out += b"".join(struct.pack("<H", c) for c in self.channels)
        out += struct.pack("<B", self.codec_id)
        return out

    @classmethod
    def unpack(cls, body: bytes) -> "MeasurementRequest":
        try:
            start, end, n_ch = struct.unpack_from("<QQH", body, 0)
            pos = 18
            channels = struct.unpack_from(f"<{n_ch}H", body, pos)
            pos += 2 * n_ch
            (codec_id,) = struct.unpack_from("<B", body, pos)
        except struct.error as exc:
            raise ProtocolError(f"bad REQUEST body: {exc}") from None
        req = cls(start_abs_second=start, end_abs_second=end,
                  channels=channels, codec_id=codec_id)
        req.validate()
        return req


@dataclass(frozen=True)
class RateUpdate:
    abs_second: int
    counts: tuple  # ((channel, count), ...)

    def pack(self) -> bytes:
        out = struct.pack("<QH", self.abs_second, len(self.counts))
        out += b"".join(struct.pack("<HQ", ch, n) for ch, n in self.counts)
        return out

    @classmethod
    def unpack(cls, body: bytes) -> "RateUpdate":
        try:
            abs_second, n = struct.unpack_from("<QH", body, 0)
            counts = tuple(struct.unpack_from("<HQ", body, 10 + 10 * i)
                           for i in range(n))
        except struct.error as exc:
            raise ProtocolError(f"bad RATE body: {exc}") from None
        return cls(abs_second=abs_second, counts=counts)


def pack_error(code: ErrorCode, message: str) -> bytes:
    return struct.pack("<H", int(code)) + message.encode("utf-8")


def unpack_error(body: bytes):
    if len(body) < 2:
        raise ProtocolError("short ERROR body")
    (code,) = struct.unpack_from("<H", body, 0)
    return ErrorCode(code), body[2:].decode("utf-8", errors="replace")


# --- server side ------------------------------------------------------------

class BlockStore:
    """Thread-safe, append-only block history with a completion flag.

    The agent pipeline appends TagBlocks in ascending (abs_second, channel)
    order; each client session keeps its own cursor. ``max_lag_seconds``
    bounds how far a stalled consumer may fall behind the newest second
    before its session is terminated with an overrun error.
    """

    def __init__(self, channels: Sequence[int], max_lag_seconds: Optional[int] = None):
        self.channels = tuple(sorted(set(int(c) for c in channels)))
        self.max_lag_seconds = max_lag_seconds
        self._blocks: list = []
        self._closed = False
        self._cond = threading.Condition()

    def append(self, block: TagBlock):
        with self._cond:
            if self._closed:
                raise RuntimeError("store is closed")
            if self._blocks:
                last = self._blocks[-1]
                if (block.abs_second, block.channel) <= (last.abs_second, last.channel):
                    raise ValueError("blocks must be appended in (second, channel) order")
            self._blocks.append(block)
            self._cond.notify_all()

    def extend(self, blocks):
        for b in blocks:
            self.append(b)

    def close(self):
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    @property
    def closed(self) -> bool:
        with self._cond:
            return self._closed

    @property
    def latest_second(self) -> Optional[int]:
        with self._cond:
            return self._blocks[-1].abs_second if self._blocks else None

    def get(self, index: int, timeout: Optional[float] = None):
        """Block at ``index``; blocks until available. None = end of stream."""
        with self._cond:
            while True:
                if index < len(self._blocks):
                    return self._blocks[index]
                if self._closed:
                    return None
                if not self._cond.wait(timeout=timeout):
                    raise TimeoutError("no new blocks")


def _session(stream, store: BlockStore):
    """Run one server session over a blocking file-like duplex stream."""
    def send(msg: Message):
        stream.write(serialize(msg))
        stream.flush()

    def fail(code: ErrorCode, text: str):
        send(Message(MsgType.ERROR, pack_error(code, text)))

    send(Message(MsgType.ADVERTISE, Advertisement(channels=store.channels).pack()))
    try:
        msg = read_message(stream)
    except ProtocolError as exc:
        if "version" in str(exc):
            fail(ErrorCode.VERSION_MISMATCH, str(exc))
        else:
            fail(ErrorCode.MALFORMED_REQUEST, str(exc))
        return
    if msg.type != MsgType.REQUEST:
        fail(ErrorCode.MALFORMED_REQUEST, f"expected REQUEST, got type {msg.type}")
        return
    try:
        req = MeasurementRequest.unpack(msg.body)
    except ProtocolError as exc:
        fail(ErrorCode.MALFORMED_REQUEST, str(exc))
        return
    unknown = [c for c in req.channels if c not in store.channels]
    if unknown:
        fail(ErrorCode.UNKNOWN_CHANNEL, f"unknown channels {unknown}")
        return
    if req.codec_id not in codec.KNOWN_CODECS:
        fail(ErrorCode.MALFORMED_REQUEST, f"unknown codec {req.codec_id}")
        return
    send(Message(MsgType.ACCEPT))

    wanted = set(req.channels)
    live = req.end_abs_second == 0
    index = 0
    open_second = None
    pending_counts: dict = {}

    def flush_rate():
        if open_second is not None:
            counts = tuple(sorted(pending_counts.items()))
            send(Message(MsgType.RATE,
                         RateUpdate(abs_second=open_second, counts=counts).pack()))

    while True:
        block = store.get(index)
        if block is None:
            break
        index += 1
        if block.abs_second < req.start_abs_second:
            continue
        if not live and block.abs_second > req.end_abs_second:
            break
        if store.max_lag_seconds is not None:
            latest = store.latest_second
            if latest is not None and latest - block.abs_second > store.max_lag_seconds:
                fail(ErrorCode.OVERRUN, "consumer fell behind the buffer window")
                return
        if block.abs_second != open_second:
            flush_rate()
            open_second = block.abs_second
            pending_counts = {}
        pending_counts[block.channel] = pending_counts.get(block.channel, 0) \
            + (block.count if block.channel in wanted else 0)
        if block.channel in wanted:
            send(Message(MsgType.DATA, codec.encode(block, req.codec_id).to_bytes()))
    flush_rate()
    send(Message(MsgType.END))


class Server:
    """Threaded TCP front-end for a BlockStore."""

    def __init__(self, store: BlockStore, host: str = "127.0.0.1", port: int = 0):
        self.store = store
        self._sock = socket.create_server((host, port))
        self.host, self.port = self._sock.getsockname()[:2]
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._running = True

    @property
    def endpoint(self) -> str:
        return f"{self.host}:{self.port}"

    def start(self) -> "Server":
        self._accept_thread.start()
        return self

    def _accept_loop(self):
        while self._running:
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            threading.Thread(target=self._serve_one, args=(conn,), daemon=True).start()

    def _serve_one(self, conn: socket.socket):
        stream = conn.makefile("rwb")
        try:
            _session(stream, self.store)
        except (ProtocolError, BrokenPipeError, ConnectionError, ValueError):
            pass
        finally:
            try:
                stream.close()
            except OSError:
                pass
            conn.close()

    def stop(self):
        self._running = False
        try:
            self._sock.close()
        except OSError:
            pass


def serve(store: BlockStore, host: str = "127.0.0.1", port: int = 0) -> Server:
    """Start serving a store; returns the running Server (ephemeral port ok)."""
    return Server(store, host, port).start()


# --- client side ------------------------------------------------------------

@dataclass
class FetchResult:
    advertisement: Advertisement
    blocks: list = field(default_factory=list)
    raw_blocks: list = field(default_factory=list)  # encoded DATA bodies, byte-exact
    rates: list = field(default_factory=list)


def _parse_endpoint(endpoint):
    if isinstance(endpoint, tuple):
        return endpoint
    host, _, port = endpoint.rpartition(":")
    return host or "127.0.0.1", int(port)


def iter_fetch(endpoint, request: MeasurementRequest, result: Optional[FetchResult] = None,
               keep_raw: bool = False) -> Iterator[TagBlock]:
    """Stream TagBlocks for a request, validating framing and ordering.

    ``result``, when given, accumulates the advertisement, rate updates and
    (optionally) raw encoded block bytes alongside the yielded blocks.
    """
    host, port = _parse_endpoint(endpoint)
    with socket.create_connection((host, port)) as sock:
        stream = sock.makefile("rwb")
        msg = read_message(stream)
        if msg.type != MsgType.ADVERTISE:
            raise ProtocolError(f"expected ADVERTISE, got type {msg.type}")
        adv = Advertisement.unpack(msg.body)
        if result is not None:
            result.advertisement = adv
        stream.write(serialize(Message(MsgType.REQUEST, request.pack())))
        stream.flush()
        msg = read_message(stream)
        if msg.type == MsgType.ERROR:
            raise RemoteError(*unpack_error(msg.body))
        if msg.type != MsgType.ACCEPT:
            raise ProtocolError(f"expected ACCEPT, got type {msg.type}")

        last_key = None
        last_per_channel: dict = {}
        while True:
            msg = read_message(stream)
            if msg.type == MsgType.END:
                return
            if msg.type == MsgType.ERROR:
                raise RemoteError(*unpack_error(msg.body))
            if msg.type == MsgType.RATE:
                if result is not None:
                    result.rates.append(RateUpdate.unpack(msg.body))
                continue
            if msg.type != MsgType.DATA:
                raise ProtocolError(f"unexpected message type {msg.type} mid-stream")
            block = codec.decode(msg.body)
            key = (block.abs_second, block.channel)
            if last_key is not None and key < last_key:
                raise OrderingViolation(f"block order regressed: {last_key} -> {key}")
            prev = last_per_channel.get(block.channel)
            if prev is not None and block.abs_second <= prev:
                raise OrderingViolation(
                    f"channel {block.channel} second regressed: {prev} -> {block.abs_second}"
                )
            last_key = key
            last_per_channel[block.channel] = block.abs_second
            if result is not None and keep_raw:
                result.raw_blocks.append(msg.body)
            if result is not None:
                result.blocks.append(block)
            yield block


def fetch(endpoint, request: MeasurementRequest, keep_raw: bool = False) -> FetchResult:
    """Eagerly fetch a whole scope; convenience wrapper over iter_fetch."""
    result = FetchResult(advertisement=Advertisement(channels=()))
    for _ in iter_fetch(endpoint, request, result=result, keep_raw=keep_raw):
        pass
    return result
