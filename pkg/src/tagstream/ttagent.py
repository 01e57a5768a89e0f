"""Per-second TT agent pipeline.

Segments a raw device stream on PPS edges, rewrites tags as offsets from the
opening edge, rescales them with the calibration factor measured from the
preceding PPS gap, and emits immutable per-second, per-channel TagBlocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .clocksim import KIND_PPS, TagStream
from .timebase import (
    IDENTITY_CF,
    MAX_FRACTIONAL_DRIFT,
    PS_PER_SECOND,
    CalibrationFactor,
    PpsEpoch,
)

#: Calibrated offsets may spill slightly past the nominal second when the
#: current PPS gap exceeds the gap the calibration factor was measured on;
#: this slack absorbs PPS jitter and small drift differences.
EDGE_SLACK_PS = 10**9


class AgentError(Exception):
    """Base class for pipeline errors."""


class MissingPpsError(AgentError):
    """Stream does not contain enough PPS events to segment."""


class MissedPpsError(AgentError):
    """Consecutive PPS epochs are not one absolute second apart."""


class NonMonotonePpsError(AgentError):
    """PPS local timestamps do not increase."""


class NegativeOffsetError(AgentError):
    """A tag precedes its governing PPS edge (segmentation bug)."""


def make_relative(raw_t_local: int, epoch: PpsEpoch) -> int:
    """Offset of a raw tag from its governing PPS edge."""
    if raw_t_local < epoch.t_local:
        raise NegativeOffsetError(
            f"tag at {raw_t_local} precedes PPS edge at {epoch.t_local}"
        )
    return raw_t_local - epoch.t_local


def calibration_factor(pps_cur: PpsEpoch, pps_old: PpsEpoch) -> CalibrationFactor:
    """Calibration factor from two consecutive PPS timestamps."""
    if pps_cur.abs_second != pps_old.abs_second + 1:
        raise MissedPpsError(
            f"PPS abs_second gap {pps_cur.abs_second - pps_old.abs_second} != 1"
        )
    if pps_cur.t_local <= pps_old.t_local:
        raise NonMonotonePpsError(
            f"PPS local time went from {pps_old.t_local} to {pps_cur.t_local}"
        )
    return CalibrationFactor(measured_ps=pps_cur.t_local - pps_old.t_local)


def calibrate(t_rel: int, cf: CalibrationFactor) -> int:
    """Rescale a relative offset by nominal/measured, round-half-even, exact."""
    if t_rel < 0:
        raise NegativeOffsetError(f"negative relative offset {t_rel}")
    q, r = divmod(t_rel * cf.nominal_ps, cf.measured_ps)
    if 2 * r > cf.measured_ps or (2 * r == cf.measured_ps and q & 1):
        q += 1
    return q


_SPLIT_BITS = 21
_SPLIT_MASK = (1 << _SPLIT_BITS) - 1


def calibrate_array(t_rel: np.ndarray, cf: CalibrationFactor) -> np.ndarray:
    """Vectorized calibrate(), bit-identical to the scalar version.

    Works in int64 by splitting t * (nominal - measured) into high/low parts;
    valid for offsets below 2**41 ps and PPS gaps within the drift bound.
    """
    t = np.asarray(t_rel, dtype=np.int64)
    if t.size and int(t.min()) < 0:
        raise NegativeOffsetError("negative relative offset in block")
    n, m = cf.nominal_ps, cf.measured_ps
    d = n - m
    if d == 0:
        return t.copy()
    hi = t >> _SPLIT_BITS
    lo = t & _SPLIT_MASK
    q1, r1 = np.divmod(hi * d, m)
    q2, r2 = np.divmod((r1 << _SPLIT_BITS) + lo * d, m)
    base = t + (q1 << _SPLIT_BITS) + q2
    twice = 2 * r2
    adjust = (twice > m) | ((twice == m) & ((base & 1) == 1))
    return base + adjust


@dataclass(frozen=True)
class TagBlock:
    """One second of calibrated, relative time tags for one channel."""

    abs_second: int
    channel: int
    cf: CalibrationFactor
    tags: np.ndarray  # int64 ps, ascending
    uncalibrated: bool = False

    def __post_init__(self):
        tags = np.ascontiguousarray(self.tags, dtype=np.int64)
        object.__setattr__(self, "tags", tags)
        if tags.size:
            if int(tags.min()) < 0 or int(tags.max()) >= PS_PER_SECOND + EDGE_SLACK_PS:
                raise AgentError(
                    f"tag offsets outside [0, {PS_PER_SECOND + EDGE_SLACK_PS}) "
                    f"in block s={self.abs_second} ch={self.channel}"
                )
            if np.any(np.diff(tags) < 0):
                raise AgentError("tags not ascending")

    @property
    def count(self) -> int:
        return int(self.tags.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TagBlock):
            return NotImplemented
        return (
            self.abs_second == other.abs_second
            and self.channel == other.channel
            and self.cf == other.cf
            and self.uncalibrated == other.uncalibrated
            and np.array_equal(self.tags, other.tags)
        )


@dataclass
class Segment:
    """Raw tags of one PPS-to-PPS interval, closed on the left."""

    epoch: PpsEpoch
    epoch_next: PpsEpoch
    channel: np.ndarray
    t_local: np.ndarray
    gap_valid: bool = True


@dataclass
class SegmentationResult:
    segments: list
    discarded_before_first_pps: int = 0
    discarded_after_last_pps: int = 0


def _gap_valid(old: PpsEpoch, cur: PpsEpoch) -> bool:
    if cur.abs_second != old.abs_second + 1:
        return False
    gap = cur.t_local - old.t_local
    return gap > 0 and abs(gap - PS_PER_SECOND) * MAX_FRACTIONAL_DRIFT.denominator \
        < PS_PER_SECOND * MAX_FRACTIONAL_DRIFT.numerator


def segment_by_pps(stream: TagStream) -> SegmentationResult:
    """Assign every tag to the greatest PPS edge at or before it.

    Tags before the first PPS and after the last PPS are discarded and
    counted. Intervals whose bracketing PPS pair is inconsistent (missed
    pulse or out-of-band local gap) are marked gap-invalid, not dropped.
    """
    is_pps = stream.kind == KIND_PPS
    pps_idx = np.flatnonzero(is_pps)
    if len(pps_idx) < 2:
        raise MissingPpsError(f"need at least two PPS events, got {len(pps_idx)}")

    tag_idx = np.flatnonzero(~is_pps)
    tag_t = stream.t_local[tag_idx]
    tag_ch = stream.channel[tag_idx]
    pps_t = stream.t_local[pps_idx]
    pps_s = stream.abs_second[pps_idx]

    # Closed-left assignment: a tag at exactly the PPS timestamp belongs to it.
    seg_of_tag = np.searchsorted(pps_t, tag_t, side="right") - 1
    before = int(np.count_nonzero(seg_of_tag < 0))
    after = int(np.count_nonzero(seg_of_tag >= len(pps_idx) - 1))

    epochs = [PpsEpoch(abs_second=int(s), t_local=int(t)) for s, t in zip(pps_s, pps_t)]
    segments = []
    bounds = np.searchsorted(seg_of_tag, np.arange(len(pps_idx)))
    for k in range(len(pps_idx) - 1):
        sel = slice(bounds[k], bounds[k + 1])
        segments.append(Segment(
            epoch=epochs[k],
            epoch_next=epochs[k + 1],
            channel=tag_ch[sel],
            t_local=tag_t[sel],
            gap_valid=_gap_valid(epochs[k], epochs[k + 1]),
        ))
    return SegmentationResult(
        segments=segments,
        discarded_before_first_pps=before,
        discarded_after_last_pps=after,
    )


def process_second(segment: Segment, channels: Sequence[int],
                   cf: Optional[CalibrationFactor] = None) -> list:
    """Turn one interval's raw tags into per-channel TagBlocks.

    ``cf`` is the factor measured on the PPS gap preceding this interval; the
    agent pipeline supplies it. ``None`` or a gap-invalid interval forces the
    identity multiplier and flags the blocks uncalibrated.
    """
    uncalibrated = cf is None or not segment.gap_valid
    if uncalibrated:
        cf = IDENTITY_CF
    blocks = []
    for ch in channels:
        sel = segment.channel == ch
        rel = segment.t_local[sel].astype(np.int64) - segment.epoch.t_local
        if rel.size and int(rel.min()) < 0:
            raise NegativeOffsetError("tag precedes its opening PPS edge")
        cal = calibrate_array(rel, cf)
        blocks.append(TagBlock(
            abs_second=segment.epoch.abs_second,
            channel=int(ch),
            cf=cf,
            tags=cal,
            uncalibrated=uncalibrated,
        ))
    return blocks


@dataclass
class PipelineCounters:
    tags_in: int = 0
    blocks_out: int = 0
    tags_out: int = 0
    discarded: int = 0
    gap_invalid_seconds: int = 0


def run_pipeline(stream: TagStream, channels: Sequence[int]):
    """Full per-second pipeline over a finished stream.

    The calibration factor for each interval comes from the preceding PPS
    gap (the two pulses last seen when the interval opens); the first
    interval, having no preceding gap, is calibrated with its own.
    Returns (blocks, counters); blocks are ordered by (abs_second, channel).
    """
    channels = sorted(set(int(c) for c in channels))
    seg_result = segment_by_pps(stream)
    counters = PipelineCounters(
        tags_in=stream.n_tags,
        discarded=(seg_result.discarded_before_first_pps
                   + seg_result.discarded_after_last_pps),
    )
    blocks = []
    prev_seg = None
    for seg in seg_result.segments:
        cf = None
        if not seg.gap_valid:
            counters.gap_invalid_seconds += 1
        else:
            ref = prev_seg if (prev_seg is not None and prev_seg.gap_valid) else seg
            if ref.gap_valid:
                cf = calibration_factor(ref.epoch_next, ref.epoch)
        for block in process_second(seg, channels, cf):
            blocks.append(block)
            counters.blocks_out += 1
            counters.tags_out += block.count
        prev_seg = seg
    return blocks, counters


def singles_rate(blocks: Iterable[TagBlock], window_s: int = 1) -> dict:
    """Per-channel counts/s series, optionally averaged over a sliding window.

    Returns {channel: (seconds, rates)} with seconds ascending.
    """
    if window_s < 1:
        raise ValueError("window_s must be >= 1")
    per_channel = {}
    for b in blocks:
        per_channel.setdefault(b.channel, {}).setdefault(b.abs_second, 0)
        per_channel[b.channel][b.abs_second] += b.count
    out = {}
    for ch, counts in per_channel.items():
        secs = np.array(sorted(counts), dtype=np.int64)
        vals = np.array([counts[s] for s in secs], dtype=np.float64)
        if window_s > 1:
            kernel = np.ones(window_s) / window_s
            vals = np.convolve(vals, kernel, mode="same")
        out[ch] = (secs, vals)
    return out
