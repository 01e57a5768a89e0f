"""Two-channel coincidence analysis.

Merges two streams of calibrated TagBlocks by reconstructed absolute time,
finds all pairs within a window (all-pairs, not one-to-one), histograms the
time differences, locates and recenters the delay peak, and reports rates.

Sign convention everywhere: dt = t_a - t_b (Alice minus Bob).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .timebase import PS_PER_SECOND
from .ttagent import TagBlock

#: Defaults for the fine histogram: the reported coincidence window is 10 ns
#: full width; bin width is an artifact choice, not a reported value.
DEFAULT_BIN_WIDTH_PS = 100
DEFAULT_HALF_WINDOW_PS = 10_000

#: Defaults for the coarse first-pass delay scan.
COARSE_HALF_WINDOW_PS = 10**7
COARSE_BIN_WIDTH_PS = 1000

MAX_DELAY_COMPENSATION_PS = 10**9


class CoincidenceError(Exception):
    pass


class NoSignalError(CoincidenceError):
    """Histogram has no statistically significant peak."""


@dataclass(frozen=True)
class DelayCompensation:
    """Constant shift added to one channel's reconstructed absolute times."""

    channel: int
    delay_ps: int

    def __post_init__(self):
        if abs(self.delay_ps) >= MAX_DELAY_COMPENSATION_PS:
            raise CoincidenceError(f"|delay| must be sub-second, got {self.delay_ps}")


@dataclass
class MatchResult:
    t_a: np.ndarray   # int64 absolute ps, compensation applied
    t_b: np.ndarray
    dt: np.ndarray    # t_a - t_b
    excluded_uncalibrated_a: int = 0
    excluded_uncalibrated_b: int = 0
    overlap_seconds: tuple = ()

    @property
    def n_pairs(self) -> int:
        return len(self.dt)

    def pair_seconds(self) -> np.ndarray:
        """abs_second label of each pair (by the Alice-side tag)."""
        return self.t_a // PS_PER_SECOND


@dataclass
class CoincidenceHistogram:
    bin_width_ps: int
    half_window_ps: int
    bins: np.ndarray  # int64 counts over [-half_window, +half_window)
    total_pairs: int
    abs_seconds_covered: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.half_window_ps <= 0 or self.bin_width_ps <= 0 \
                or (2 * self.half_window_ps) % self.bin_width_ps:
            raise CoincidenceError(
                f"window 2*{self.half_window_ps} not divisible by bin {self.bin_width_ps}"
            )
        expected = 2 * self.half_window_ps // self.bin_width_ps
        self.bins = np.ascontiguousarray(self.bins, dtype=np.int64)
        if len(self.bins) != expected:
            raise CoincidenceError(f"expected {expected} bins, got {len(self.bins)}")
        if int(self.bins.sum()) != self.total_pairs:
            raise CoincidenceError("bin counts do not sum to total_pairs")

    @property
    def n_bins(self) -> int:
        return len(self.bins)

    def bin_centers(self) -> np.ndarray:
        return (-self.half_window_ps + self.bin_width_ps * (np.arange(self.n_bins) + 0.5))


def reconstruct_times(blocks: Iterable[TagBlock],
                      comps: Sequence[DelayCompensation] = ()) -> tuple:
    """Absolute picosecond times from calibrated blocks, compensation applied.

    Uncalibrated blocks are excluded and counted. Returns (times, seconds,
    n_excluded); times are sorted ascending.
    """
    comp_by_channel = {c.channel: c.delay_ps for c in comps}
    parts = []
    seconds = set()
    excluded = 0
    for b in blocks:
        if b.uncalibrated:
            excluded += 1
            continue
        t = b.abs_second * PS_PER_SECOND + b.tags + comp_by_channel.get(b.channel, 0)
        parts.append(t)
        seconds.add(b.abs_second)
    if parts:
        times = np.concatenate(parts)
        times.sort(kind="stable")
    else:
        times = np.zeros(0, dtype=np.int64)
    return times, seconds, excluded


def match_coincidences(blocks_a, blocks_b, comps: Sequence[DelayCompensation] = (),
                       half_window_ps: int = DEFAULT_HALF_WINDOW_PS) -> MatchResult:
    """All pairs (a, b) with |t_a - t_b| <= half_window_ps.

    Equivalent to the O(n^2) all-pairs filter; implemented as a sorted sweep
    with searchsorted bounds per Alice tag.
    """
    if half_window_ps <= 0:
        raise CoincidenceError("half_window_ps must be positive")
    t_a, secs_a, excl_a = reconstruct_times(blocks_a, comps)
    t_b, secs_b, excl_b = reconstruct_times(blocks_b, comps)
    overlap = tuple(sorted(secs_a & secs_b))

    if t_a.size == 0 or t_b.size == 0 or not overlap:
        return MatchResult(
            t_a=np.zeros(0, np.int64), t_b=np.zeros(0, np.int64),
            dt=np.zeros(0, np.int64),
            excluded_uncalibrated_a=excl_a, excluded_uncalibrated_b=excl_b,
            overlap_seconds=overlap,
        )

    lo = np.searchsorted(t_b, t_a - half_window_ps, side="left")
    hi = np.searchsorted(t_b, t_a + half_window_ps, side="right")
    counts = hi - lo
    idx_a = np.repeat(np.arange(t_a.size), counts)
    # For each Alice tag, its Bob partners are the run lo[i] .. hi[i)-1.
    offsets = np.concatenate(([0], np.cumsum(counts)[:-1]))
    idx_b = np.repeat(lo, counts) + (np.arange(int(counts.sum())) - np.repeat(offsets, counts))
    pa = t_a[idx_a]
    pb = t_b[idx_b]
    return MatchResult(
        t_a=pa, t_b=pb, dt=pa - pb,
        excluded_uncalibrated_a=excl_a, excluded_uncalibrated_b=excl_b,
        overlap_seconds=overlap,
    )


def histogram(dt, bin_width_ps: int = DEFAULT_BIN_WIDTH_PS,
              half_window_ps: int = DEFAULT_HALF_WINDOW_PS,
              abs_seconds_covered=()) -> CoincidenceHistogram:
    """Bin time differences over [-half_window, +half_window).

    Accepts a MatchResult or an array of dt values. Counts are conserved:
    every input dt with |dt| <= half_window lands in a bin (dt exactly at
    +half_window is clamped into the last bin).
    """
    if isinstance(dt, MatchResult):
        if not abs_seconds_covered:
            abs_seconds_covered = dt.overlap_seconds
        dt = dt.dt
    if (2 * half_window_ps) % bin_width_ps:
        raise CoincidenceError("bin width must divide the full window")
    dt = np.asarray(dt, dtype=np.int64)
    if dt.size and (int(dt.min()) < -half_window_ps or int(dt.max()) > half_window_ps):
        raise CoincidenceError("dt outside the histogram window")
    n_bins = 2 * half_window_ps // bin_width_ps
    idx = np.minimum((dt + half_window_ps) // bin_width_ps, n_bins - 1)
    bins = np.bincount(idx, minlength=n_bins).astype(np.int64)
    return CoincidenceHistogram(
        bin_width_ps=bin_width_ps, half_window_ps=half_window_ps,
        bins=bins, total_pairs=int(dt.size),
        abs_seconds_covered=frozenset(abs_seconds_covered),
    )


def accumulate(h1: CoincidenceHistogram, h2: CoincidenceHistogram) -> CoincidenceHistogram:
    """Element-wise sum of two identically shaped histograms."""
    if (h1.bin_width_ps, h1.half_window_ps) != (h2.bin_width_ps, h2.half_window_ps):
        raise CoincidenceError("histogram shapes differ")
    return CoincidenceHistogram(
        bin_width_ps=h1.bin_width_ps,
        half_window_ps=h1.half_window_ps,
        bins=h1.bins + h2.bins,
        total_pairs=h1.total_pairs + h2.total_pairs,
        abs_seconds_covered=frozenset(h1.abs_seconds_covered | h2.abs_seconds_covered),
    )


def empty_histogram(bin_width_ps: int = DEFAULT_BIN_WIDTH_PS,
                    half_window_ps: int = DEFAULT_HALF_WINDOW_PS) -> CoincidenceHistogram:
    n_bins = 2 * half_window_ps // bin_width_ps
    return CoincidenceHistogram(
        bin_width_ps=bin_width_ps, half_window_ps=half_window_ps,
        bins=np.zeros(n_bins, dtype=np.int64), total_pairs=0,
    )


@dataclass(frozen=True)
class PeakEstimate:
    center_ps: float      # count-weighted centroid over the peak neighborhood
    height: int           # counts in the argmax bin
    background: float     # median off-peak bin count
    rms_width_ps: float   # count-weighted RMS spread about the centroid


def find_peak(h: CoincidenceHistogram, centroid_bins: int = 2,
              exclusion_bins: int = 5) -> PeakEstimate:
    """Locate the coincidence peak.

    Argmax bin (ties -> smallest center), centroid refined over
    +-centroid_bins, background as the median count outside
    +-exclusion_bins of the peak. Raises NoSignalError when the peak does
    not clear background + 5*sqrt(background).
    """
    if h.total_pairs == 0:
        raise NoSignalError("empty histogram")
    bins = h.bins
    peak_idx = int(np.argmax(bins))
    height = int(bins[peak_idx])
    outside = np.ones(h.n_bins, dtype=bool)
    outside[max(0, peak_idx - exclusion_bins):peak_idx + exclusion_bins + 1] = False
    background = float(np.median(bins[outside])) if outside.any() else 0.0
    if height < background + 5.0 * math.sqrt(background) or height == 0:
        raise NoSignalError(
            f"peak {height} not significant over background {background:.1f}"
        )
    centers = h.bin_centers()
    lo = max(0, peak_idx - centroid_bins)
    hi = min(h.n_bins, peak_idx + centroid_bins + 1)
    weights = np.maximum(bins[lo:hi] - background, 0.0)
    if weights.sum() <= 0:
        weights = bins[lo:hi].astype(float)
    centroid = float(np.average(centers[lo:hi], weights=weights))

    # RMS width about the centroid over a wider, background-subtracted region.
    wlo = max(0, peak_idx - exclusion_bins)
    whi = min(h.n_bins, peak_idx + exclusion_bins + 1)
    w = np.maximum(bins[wlo:whi] - background, 0.0)
    if w.sum() > 0:
        var = float(np.average((centers[wlo:whi] - centroid) ** 2, weights=w))
        rms = math.sqrt(var)
    else:
        rms = float("nan")
    return PeakEstimate(center_ps=centroid, height=height,
                        background=background, rms_width_ps=rms)


def auto_compensate(blocks_a, blocks_b, coarse_window_ps: int = COARSE_HALF_WINDOW_PS,
                    bin_width_ps: int = COARSE_BIN_WIDTH_PS,
                    channel: Optional[int] = None) -> DelayCompensation:
    """Find the inter-lab delay and return the shift that recenters it at 0.

    Runs a wide-window match and histogram, locates the peak, and returns a
    compensation for the Alice-side channel (or ``channel`` if given) such
    that re-running leaves |peak center| within one coarse bin.
    """
    result = match_coincidences(blocks_a, blocks_b, (), half_window_ps=coarse_window_ps)
    h = histogram(result, bin_width_ps=bin_width_ps, half_window_ps=coarse_window_ps)
    peak = find_peak(h)
    if channel is None:
        channels = {b.channel for b in blocks_a}
        if len(channels) != 1:
            raise CoincidenceError(
                f"ambiguous compensation target, stream A has channels {sorted(channels)}"
            )
        channel = channels.pop()
    return DelayCompensation(channel=int(channel), delay_ps=-int(round(peak.center_ps)))


@dataclass
class RateReport:
    seconds: np.ndarray          # int64
    coincidences: np.ndarray     # int64 pairs per second
    max_singles: np.ndarray      # int64 max over channels per second
    ratio: np.ndarray            # float64, NaN where singles are zero


def coincidence_rate(pairs_per_second: dict, singles_per_second: dict) -> RateReport:
    """Combine aligned per-second series into a rate report.

    ``pairs_per_second`` maps abs_second -> coincidence count;
    ``singles_per_second`` maps channel -> {abs_second -> count}. The
    efficiency ratio is coincidences / max-over-channels singles; seconds
    with zero singles carry NaN as the undefined marker.
    """
    seconds = sorted(set(pairs_per_second) | {s for d in singles_per_second.values() for s in d})
    secs = np.array(seconds, dtype=np.int64)
    coinc = np.array([pairs_per_second.get(s, 0) for s in seconds], dtype=np.int64)
    max_singles = np.array(
        [max((d.get(s, 0) for d in singles_per_second.values()), default=0) for s in seconds],
        dtype=np.int64,
    )
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(max_singles > 0, coinc / np.maximum(max_singles, 1), np.nan)
    return RateReport(seconds=secs, coincidences=coinc, max_singles=max_singles, ratio=ratio)


# --- CSV emitters -----------------------------------------------------------

def histogram_csv(h: CoincidenceHistogram) -> str:
    lines = ["bin_center_ps,count"]
    centers = h.bin_centers()
    for c, n in zip(centers, h.bins):
        lines.append(f"{c:.1f},{int(n)}")
    return "\n".join(lines) + "\n"


def rates_csv(report: RateReport) -> str:
    lines = ["abs_second,coincidences,max_singles,ratio"]
    for s, c, m, r in zip(report.seconds, report.coincidences,
                          report.max_singles, report.ratio):
        ratio_txt = "" if np.isnan(r) else f"{r:.6f}"
        lines.append(f"{int(s)},{int(c)},{int(m)},{ratio_txt}")
    return "\n".join(lines) + "\n"
