""".ttraw raw stream files.

Record layout (little-endian, all records start on 8-byte boundaries):

  tag:  u8 kind=0 | u16 channel | 40-bit t_local (low bits)        = 8 bytes
  pps:  u8 kind=1 | u16 channel | 40-bit t_local | u64 abs_second  = 16 bytes

Timestamps are stored truncated to 40 bits. Full values are reconstructed
from monotonicity: consecutive records must be less than 2**40 ps (~1.0995 s)
apart, which holds for any stream carrying a PPS every second. The first
record's 40-bit value is taken verbatim, so the file preserves absolute
local time only when the stream starts below 2**40 ps; offsets and PPS
labels are unaffected either way.
"""

from __future__ import annotations

import numpy as np

from .clocksim import KIND_PPS, KIND_TAG, TagStream

_T40_MASK = (1 << 40) - 1


class TtrawError(Exception):
    pass


def write_ttraw(path, stream: TagStream):
    n = len(stream)
    if n == 0:
        with open(path, "wb"):
            pass
        return
    is_pps = stream.kind == KIND_PPS
    lengths = np.where(is_pps, 16, 8).astype(np.int64)
    offsets = np.concatenate(([0], np.cumsum(lengths)[:-1]))
    out = np.zeros(int(lengths.sum()), dtype=np.uint8)

    t40 = (stream.t_local.astype(np.int64) & _T40_MASK).astype(np.uint64)
    out[offsets] = stream.kind
    ch = stream.channel.astype("<u2").view(np.uint8).reshape(-1, 2)
    t_bytes = t40.astype("<u8").view(np.uint8).reshape(-1, 8)
    for j in range(2):
        out[offsets + 1 + j] = ch[:, j]
    for j in range(5):
        out[offsets + 3 + j] = t_bytes[:, j]
    if is_pps.any():
        pps_off = offsets[is_pps]
        s_bytes = stream.abs_second[is_pps].astype("<u8").view(np.uint8).reshape(-1, 8)
        for j in range(8):
            out[pps_off + 8 + j] = s_bytes[:, j]

    with open(path, "wb") as fh:
        fh.write(out.tobytes())


def read_ttraw(path) -> TagStream:
    with open(path, "rb") as fh:
        buf = np.frombuffer(fh.read(), dtype=np.uint8)
    kinds, channels, t40s, abs_secs = [], [], [], []
    pos = 0
    n = len(buf)
    while pos < n:
        k = int(buf[pos])
        if k == KIND_PPS:
            if pos + 16 > n:
                raise TtrawError("truncated PPS record")
            rec = buf[pos:pos + 16]
            kinds.append(KIND_PPS)
            channels.append(int(rec[1]) | (int(rec[2]) << 8))
            t40s.append(_read40(rec, 3))
            abs_secs.append(int(rec[8:16].view("<u8")[0]))
            pos += 16
        elif k == KIND_TAG:
            # Run of fixed-size tag records: scan kind bytes vectorized.
            cand = np.arange(pos, n - 7, 8)
            run_kinds = buf[cand]
            stops = np.flatnonzero(run_kinds != KIND_TAG)
            run_len = int(stops[0]) if stops.size else len(cand)
            if run_len == 0:
                raise TtrawError(f"unknown record kind {int(run_kinds[0])} at {pos}")
            end = pos + 8 * run_len
            rec = buf[pos:end].reshape(-1, 8)
            kinds.extend([KIND_TAG] * run_len)
            channels.extend(np.ascontiguousarray(rec[:, 1:3]).view("<u2").ravel().tolist())
            t40 = np.zeros((run_len, 8), dtype=np.uint8)
            t40[:, :5] = rec[:, 3:8]
            t40s.extend(t40.view("<u8").ravel().tolist())
            abs_secs.extend([-1] * run_len)
            pos = end
        else:
            raise TtrawError(f"unknown record kind {k} at offset {pos}")

    t40_arr = np.asarray(t40s, dtype=np.int64)
    t_local = _reconstruct(t40_arr)
    return TagStream(
        kind=np.asarray(kinds, dtype=np.uint8),
        channel=np.asarray(channels, dtype=np.uint16),
        t_local=t_local,
        abs_second=np.asarray(abs_secs, dtype=np.int64),
    )


def _read40(rec: np.ndarray, offset: int) -> int:
    val = 0
    for j in range(5):
        val |= int(rec[offset + j]) << (8 * j)
    return val


def _reconstruct(t40: np.ndarray) -> np.ndarray:
    """Undo the 40-bit truncation using monotone deltas < 2**40."""
    if t40.size == 0:
        return t40.copy()
    deltas = np.diff(t40) & _T40_MASK
    return np.concatenate(([t40[0]], t40[0] + np.cumsum(deltas)))
