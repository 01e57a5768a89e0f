"""Lossless block container and compression pipeline.

An EncodedBlock is a fixed self-describing little-endian header followed by
one payload. Three codecs are registered:

  0  raw 40-bit fixed width (5 bytes per tag)
  1  first tag as LEB128 varint, then successive differences as varints
  2  codec 1 followed by a DEFLATE stage (zlib level 6, pinned)

The format needs no out-of-band information beyond this registry.
"""

from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Iterator

import numpy as np

from .timebase import CalibrationFactor, TimebaseError
from .ttagent import AgentError, TagBlock

MAGIC = b"TTB1"

CODEC_RAW40 = 0
CODEC_DELTA_VARINT = 1
CODEC_DELTA_VARINT_ZLIB = 2
DEFAULT_CODEC = CODEC_DELTA_VARINT_ZLIB
KNOWN_CODECS = (CODEC_RAW40, CODEC_DELTA_VARINT, CODEC_DELTA_VARINT_ZLIB)

#: DEFLATE level for codec 2; part of the format, do not change casually.
ZLIB_LEVEL = 6

FLAG_UNCALIBRATED = 0x0001

# magic, abs_second u64, channel u16, flags u16, cf_measured u64, count u64,
# codec_id u8, payload_len u64
_HEADER = struct.Struct("<4sQHHQQBQ")
HEADER_SIZE = _HEADER.size  # 41 bytes

_RAW40_MAX = 1 << 40
_VARINT_MAX = 1 << 48


class CodecError(Exception):
    """Base class for encode/decode failures."""


class TagOutOfRangeError(CodecError):
    """A tag offset does not fit the codec's representable range."""


class CorruptHeaderError(CodecError):
    pass


class CorruptPayloadError(CodecError):
    pass


class UnknownCodecError(CodecError):
    pass


class UndefinedForEmptyError(CodecError):
    """bytes_per_tag over zero tags."""


@dataclass(frozen=True)
class EncodedBlock:
    abs_second: int
    channel: int
    flags: int
    cf_measured_ps: int
    count: int
    codec_id: int
    payload: bytes

    @property
    def payload_len(self) -> int:
        return len(self.payload)

    @property
    def total_bytes(self) -> int:
        return HEADER_SIZE + len(self.payload)

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(
            MAGIC, self.abs_second, self.channel, self.flags,
            self.cf_measured_ps, self.count, self.codec_id, len(self.payload),
        )
        return header + self.payload


def _varint_encode(values: np.ndarray) -> bytes:
    """LEB128-encode an array of unsigned values < 2**48."""
    v = values.astype(np.uint64)
    if v.size == 0:
        return b""
    lengths = np.ones(v.shape, dtype=np.int64)
    for shift in range(7, 49, 7):
        lengths += (v >= (np.uint64(1) << np.uint64(shift))).astype(np.int64)
    offsets = np.concatenate(([0], np.cumsum(lengths)[:-1]))
    out = np.zeros(int(lengths.sum()), dtype=np.uint8)
    for j in range(7):
        mask = lengths > j
        if not mask.any():
            break
        byte = (v[mask] >> np.uint64(7 * j)) & np.uint64(0x7F)
        cont = (lengths[mask] > j + 1).astype(np.uint8) << 7
        out[offsets[mask] + j] = byte.astype(np.uint8) | cont
    return out.tobytes()


def _varint_decode(payload: bytes) -> np.ndarray:
    """Decode a LEB128 byte stream into uint64 values."""
    data = np.frombuffer(payload, dtype=np.uint8)
    if data.size == 0:
        return np.zeros(0, dtype=np.uint64)
    if data[-1] & 0x80:
        raise CorruptPayloadError("truncated varint stream")
    ends = np.flatnonzero((data & 0x80) == 0)
    starts = np.concatenate(([0], ends[:-1] + 1))
    if np.any(ends - starts + 1 > 7):
        raise CorruptPayloadError("varint longer than 7 bytes")
    pos = np.arange(data.size, dtype=np.int64) - np.repeat(starts, ends - starts + 1)
    parts = (data & np.uint8(0x7F)).astype(np.uint64) << (np.uint64(7) * pos.astype(np.uint64))
    return np.add.reduceat(parts, starts)


def _encode_raw40(tags: np.ndarray) -> bytes:
    if tags.size and int(tags.max()) >= _RAW40_MAX:
        raise TagOutOfRangeError("tag offset needs more than 40 bits for codec 0")
    expanded = tags.astype("<u8").view(np.uint8).reshape(-1, 8)
    return np.ascontiguousarray(expanded[:, :5]).tobytes()


def _decode_raw40(payload: bytes, count: int) -> np.ndarray:
    if len(payload) != 5 * count:
        raise CorruptPayloadError(
            f"raw40 payload length {len(payload)} != 5 * count {count}"
        )
    raw = np.frombuffer(payload, dtype=np.uint8).reshape(-1, 5)
    full = np.zeros((count, 8), dtype=np.uint8)
    full[:, :5] = raw
    return full.view("<u8").ravel().astype(np.int64)


def _encode_delta_varint(tags: np.ndarray) -> bytes:
    if tags.size == 0:
        return b""
    if int(tags.max()) >= _VARINT_MAX or int(tags.min()) < 0:
        raise TagOutOfRangeError("tag offset needs more than 48 bits")
    deltas = np.empty_like(tags)
    deltas[0] = tags[0]
    np.subtract(tags[1:], tags[:-1], out=deltas[1:])
    return _varint_encode(deltas)


def _decode_delta_varint(payload: bytes, count: int) -> np.ndarray:
    deltas = _varint_decode(payload)
    if deltas.size != count:
        raise CorruptPayloadError(f"decoded {deltas.size} values, header says {count}")
    return np.cumsum(deltas.astype(np.int64))


def encode(block: TagBlock, codec_id: int = DEFAULT_CODEC) -> EncodedBlock:
    """Serialize a TagBlock; never fails for in-range input."""
    if codec_id not in KNOWN_CODECS:
        raise UnknownCodecError(f"codec {codec_id}")
    tags = block.tags
    if codec_id == CODEC_RAW40:
        payload = _encode_raw40(tags)
    else:
        payload = _encode_delta_varint(tags)
        if codec_id == CODEC_DELTA_VARINT_ZLIB:
            payload = zlib.compress(payload, ZLIB_LEVEL)
    flags = FLAG_UNCALIBRATED if block.uncalibrated else 0
    return EncodedBlock(
        abs_second=block.abs_second,
        channel=block.channel,
        flags=flags,
        cf_measured_ps=block.cf.measured_ps,
        count=block.count,
        codec_id=codec_id,
        payload=payload,
    )


def parse_header(data: bytes):
    if len(data) < HEADER_SIZE:
        raise CorruptHeaderError(f"short header: {len(data)} bytes")
    magic, abs_second, channel, flags, cf_measured, count, codec_id, payload_len = \
        _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CorruptHeaderError(f"bad magic {magic!r}")
    return abs_second, channel, flags, cf_measured, count, codec_id, payload_len


def decode(encoded) -> TagBlock:
    """Exact inverse of encode(); accepts an EncodedBlock or raw bytes."""
    if isinstance(encoded, (bytes, bytearray, memoryview)):
        encoded = from_bytes(bytes(encoded))
    if encoded.codec_id not in KNOWN_CODECS:
        raise UnknownCodecError(f"codec {encoded.codec_id}")
    payload = encoded.payload
    if encoded.codec_id == CODEC_RAW40:
        tags = _decode_raw40(payload, encoded.count)
    else:
        if encoded.codec_id == CODEC_DELTA_VARINT_ZLIB:
            try:
                payload = zlib.decompress(payload)
            except zlib.error as exc:
                raise CorruptPayloadError(f"deflate stage: {exc}") from None
        tags = _decode_delta_varint(payload, encoded.count)
    try:
        return TagBlock(
            abs_second=encoded.abs_second,
            channel=encoded.channel,
            cf=CalibrationFactor(measured_ps=encoded.cf_measured_ps),
            tags=tags,
            uncalibrated=bool(encoded.flags & FLAG_UNCALIBRATED),
        )
    except (AgentError, TimebaseError) as exc:
        raise CorruptPayloadError(f"decoded block violates invariants: {exc}") from exc


def from_bytes(data: bytes) -> EncodedBlock:
    abs_second, channel, flags, cf_measured, count, codec_id, payload_len = parse_header(data)
    if len(data) != HEADER_SIZE + payload_len:
        raise CorruptPayloadError(
            f"expected {HEADER_SIZE + payload_len} bytes, got {len(data)}"
        )
    return EncodedBlock(
        abs_second=abs_second, channel=channel, flags=flags,
        cf_measured_ps=cf_measured, count=count, codec_id=codec_id,
        payload=data[HEADER_SIZE:],
    )


def bytes_per_tag(encoded_blocks: Iterable[EncodedBlock]) -> Fraction:
    """Total encoded bytes (headers + payloads) per tag."""
    total_bytes = 0
    total_tags = 0
    for eb in encoded_blocks:
        total_bytes += eb.total_bytes
        total_tags += eb.count
    if total_tags == 0:
        raise UndefinedForEmptyError("no tags across blocks")
    return Fraction(total_bytes, total_tags)


def reduction_percent(raw_bytes_per_tag: Fraction, compressed_bytes_per_tag: Fraction) -> Fraction:
    """Storage reduction of a compressed representation vs a raw baseline."""
    return (raw_bytes_per_tag - compressed_bytes_per_tag) / raw_bytes_per_tag * 100


def write_ttb(path, encoded_blocks: Iterable[EncodedBlock]):
    """A .ttb file is the plain concatenation of EncodedBlocks."""
    with open(path, "wb") as fh:
        for eb in encoded_blocks:
            fh.write(eb.to_bytes())


def read_ttb(path) -> Iterator[EncodedBlock]:
    with open(path, "rb") as fh:
        data = fh.read()
    view = memoryview(data)
    pos = 0
    while pos < len(data):
        header = bytes(view[pos:pos + HEADER_SIZE])
        *_, payload_len = parse_header(header)
        end = pos + HEADER_SIZE + payload_len
        if end > len(data):
            raise CorruptPayloadError("truncated .ttb file")
        yield from_bytes(bytes(view[pos:end]))
        pos = end
