"""Core time representations and bit-width arithmetic.

All times are signed integer picosecond counts. Python ints are unbounded,
so the required +/- 2**62 ps range is free; the point of keeping everything
integral is bit-exact reproducibility through the codec and the wire.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

PS_PER_SECOND = 10**12
PS_PER_DAY = 86_400 * PS_PER_SECOND

#: Channel id reserved for the PPS reference signal in raw streams.
PPS_CHANNEL = 0

#: Relative fractional bound on a PPS gap before it is considered a missed
#: pulse rather than oscillator drift.
MAX_FRACTIONAL_DRIFT = Fraction(1, 1000)


class TimebaseError(ValueError):
    """Invalid argument to a timebase operation."""


@dataclass(frozen=True)
class RawTag:
    """One detection event as emitted by a (simulated) time tagger."""

    channel: int
    t_local: int  # ps on the device's free-running clock


@dataclass(frozen=True)
class PpsEpoch:
    """A PPS edge: local-clock timestamp paired with its absolute second label."""

    abs_second: int
    t_local: int


@dataclass(frozen=True)
class RelativeTag:
    """A tag expressed as an offset from the governing PPS edge."""

    channel: int
    t_rel: int


@dataclass(frozen=True)
class CalibrationFactor:
    """Per-second clock correction derived from consecutive PPS timestamps.

    The applied multiplier is ``nominal_ps / measured_ps`` (dimensionless),
    so calibrated offsets stay in picoseconds.
    """

    measured_ps: int
    nominal_ps: int = field(default=PS_PER_SECOND)

    def __post_init__(self):
        if self.measured_ps <= 0:
            raise TimebaseError(f"measured_ps must be positive, got {self.measured_ps}")
        if abs(Fraction(self.measured_ps - self.nominal_ps, self.nominal_ps)) >= MAX_FRACTIONAL_DRIFT:
            raise TimebaseError(
                f"PPS gap {self.measured_ps} ps deviates from nominal by more than "
                f"{float(MAX_FRACTIONAL_DRIFT):g}; likely a missed pulse"
            )

    @property
    def multiplier(self) -> Fraction:
        return Fraction(self.nominal_ps, self.measured_ps)

    @property
    def is_identity(self) -> bool:
        return self.measured_ps == self.nominal_ps


#: Identity factor used for blocks that could not be calibrated.
IDENTITY_CF = CalibrationFactor(measured_ps=PS_PER_SECOND)


def required_bits(interval_ps: int, resolution_ps: int = 1) -> int:
    """Minimum bit-width to represent any offset in [0, interval) at a resolution.

    With ``n = ceil(interval / resolution)`` representable values the answer is
    ``ceil(log2(n))``, computed in exact integer arithmetic.
    """
    if interval_ps <= 0:
        raise TimebaseError(f"interval must be positive, got {interval_ps}")
    if resolution_ps < 1:
        raise TimebaseError(f"resolution must be >= 1 ps, got {resolution_ps}")
    n_values = -(-interval_ps // resolution_ps)
    return (n_values - 1).bit_length()


def overflow_horizon(bits: int, resolution_ps: int = 1) -> Fraction:
    """Duration in days before a counter of the given width overflows."""
    if not 1 <= bits <= 63:
        raise TimebaseError(f"bits must be in [1, 63], got {bits}")
    if resolution_ps < 1:
        raise TimebaseError(f"resolution must be >= 1 ps, got {resolution_ps}")
    return Fraction((1 << bits) * resolution_ps, PS_PER_DAY)


#: Horizon of the common 64-bit signed timestamp format at 1 ps: the magnitude
#: is 63 bits, which is the ~106.75-day figure quoted for such devices.
SIGNED_64BIT_HORIZON_DAYS = overflow_horizon(63, 1)
#: Unsigned 64-bit variant, included for completeness. Computed directly since
#: overflow_horizon() caps at 63 bits of magnitude.
UNSIGNED_64BIT_HORIZON_DAYS = Fraction(1 << 64, PS_PER_DAY)


def abs_time_of(tag: RelativeTag, epoch: PpsEpoch) -> tuple[int, int]:
    """Globally comparable (abs_second, t_rel) pair for a relative tag.

    Lexicographic order on the pair equals order by the reconstructed
    absolute picosecond value ``abs_second * 10**12 + t_rel``.
    """
    return (epoch.abs_second, tag.t_rel)
