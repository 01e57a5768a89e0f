"""Distributed time-tag acquisition toolkit.

Simulated photon-pair sources and drifting clocks feed per-second TT agent
pipelines (PPS segmentation, relative timestamping, calibration), a lossless
block codec, a measurement-plane streaming protocol, and a two-channel
coincidence analyzer.
"""

from .timebase import (
    PS_PER_SECOND,
    PPS_CHANNEL,
    CalibrationFactor,
    PpsEpoch,
    RawTag,
    RelativeTag,
    overflow_horizon,
    required_bits,
)
from .clocksim import OscillatorModel, ScenarioConfig, default_scenario, simulate
from .ttagent import TagBlock, run_pipeline, segment_by_pps
from .codec import decode, encode
from .coincidence import (
    CoincidenceHistogram,
    DelayCompensation,
    auto_compensate,
    match_coincidences,
)

__version__ = "0.1.0"

__all__ = [
    "PS_PER_SECOND", "PPS_CHANNEL", "CalibrationFactor", "PpsEpoch", "RawTag",
    "RelativeTag", "overflow_horizon", "required_bits",
    "OscillatorModel", "ScenarioConfig", "default_scenario", "simulate",
    "TagBlock", "run_pipeline", "segment_by_pps",
    "decode", "encode",
    "CoincidenceHistogram", "DelayCompensation", "auto_compensate",
    "match_coincidences",
    "__version__",
]
