"""Deterministic two-lab experiment simulator.

Stands in for the photon-pair source, detectors, free-running time-tagger
oscillators, and the WR-disciplined PPS. Every noise source draws from its
own spawned sub-stream of one seeded generator, so output is bit-identical
for a given config regardless of evaluation order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Iterator, Union

import numpy as np

from .timebase import PS_PER_SECOND, PPS_CHANNEL, PpsEpoch, RawTag

KIND_TAG = 0
KIND_PPS = 1

# Provenance labels for per-event truth records.
SOURCE_PPS = -2
SOURCE_DARK = -1


class ConfigError(ValueError):
    """Invalid simulation scenario."""


@dataclass(frozen=True)
class OscillatorModel:
    """Free-running oscillator: linear fractional offset plus a per-second
    Gaussian random walk on accumulated phase (piecewise-linear in between)."""

    frac_offset: float = 0.0
    rw_step_ps: float = 0.0
    offset_ps: int = 0  # constant phase offset of the local counter
    seed: int = 0

    def validate(self):
        if abs(self.frac_offset) >= 1e-3:
            raise ConfigError(f"|frac_offset| must be < 1e-3, got {self.frac_offset}")
        if self.rw_step_ps < 0:
            raise ConfigError("rw_step_ps must be non-negative")


@dataclass(frozen=True)
class ScenarioConfig:
    """Full parameterization of a simulated two-lab run (Alice = a, Bob = b)."""

    pair_rate_hz: float = 0.0
    eff_a: float = 1.0
    eff_b: float = 1.0
    dark_rate_a_hz: float = 0.0
    dark_rate_b_hz: float = 0.0
    delay_a_ps: int = 0
    delay_b_ps: int = 0
    jitter_a_ps: float = 0.0
    jitter_b_ps: float = 0.0
    osc_a: OscillatorModel = field(default_factory=OscillatorModel)
    osc_b: OscillatorModel = field(default_factory=OscillatorModel)
    duration_s: int = 1
    pps_jitter_ps: float = 0.0
    seed: int = 0
    channel_a: int = 2
    channel_b: int = 1
    abs_second0: int = 0

    def validate(self):
        if self.pair_rate_hz < 0 or self.dark_rate_a_hz < 0 or self.dark_rate_b_hz < 0:
            raise ConfigError("rates must be non-negative")
        if not (0.0 <= self.eff_a <= 1.0 and 0.0 <= self.eff_b <= 1.0):
            raise ConfigError("efficiencies must lie in [0, 1]")
        if self.duration_s < 0:
            raise ConfigError("duration_s must be non-negative")
        if self.jitter_a_ps < 0 or self.jitter_b_ps < 0 or self.pps_jitter_ps < 0:
            raise ConfigError("jitters must be non-negative")
        if PPS_CHANNEL in (self.channel_a, self.channel_b):
            raise ConfigError(f"channel {PPS_CHANNEL} is reserved for PPS")
        self.osc_a.validate()
        self.osc_b.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        for key in ("osc_a", "osc_b"):
            if key in d and isinstance(d[key], dict):
                d[key] = OscillatorModel(**d[key])
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "ScenarioConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_file(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def default_scenario(**overrides) -> ScenarioConfig:
    """Desk-scale scenario: a 10x scale-down of the reported live experiment
    (60k / 55k singles per second, ~2,500 coincidences per second, inter-lab
    delay of 7 us)."""
    base = dict(
        pair_rate_hz=1.32e6,
        eff_a=1 / 24,       # Alice ~55,000 singles/s
        eff_b=1 / 22,       # Bob   ~60,000 singles/s
        dark_rate_a_hz=100.0,
        dark_rate_b_hz=100.0,
        delay_a_ps=7_000_000,
        delay_b_ps=0,
        jitter_a_ps=50.0,
        jitter_b_ps=50.0,
        osc_a=OscillatorModel(frac_offset=1e-6, rw_step_ps=0.0, offset_ps=5_000_000),
        osc_b=OscillatorModel(frac_offset=-5e-7, rw_step_ps=0.0, offset_ps=3_000_000),
        duration_s=10,
        pps_jitter_ps=5.0,
        seed=42,
    )
    base.update(overrides)
    cfg = ScenarioConfig(**base)
    cfg.validate()
    return cfg


class ClockState:
    """Realized clock function of one device.

    local(t) = t * (1 + frac_offset) + phase_rw(t) + offset_ps, where
    phase_rw interpolates linearly between per-second random-walk values.
    """

    def __init__(self, model: OscillatorModel, walk_ps: np.ndarray):
        self.model = model
        self.walk_ps = np.asarray(walk_ps, dtype=np.float64)

    @classmethod
    def generate(cls, model: OscillatorModel, duration_s: int, rng: np.random.Generator) -> "ClockState":
        steps = rng.normal(0.0, model.rw_step_ps, size=duration_s + 2)
        walk = np.concatenate(([0.0], np.cumsum(steps)))
        return cls(model, walk)

    def local(self, t_true_ps: np.ndarray) -> np.ndarray:
        """Map true times (ps) to local-clock integer picoseconds."""
        t = np.asarray(t_true_ps, dtype=np.float64)
        sec = np.clip(np.floor(t / PS_PER_SECOND), 0, len(self.walk_ps) - 2).astype(np.int64)
        frac = t / PS_PER_SECOND - sec
        phase = self.walk_ps[sec] + frac * (self.walk_ps[sec + 1] - self.walk_ps[sec])
        local = t + t * self.model.frac_offset + phase + self.model.offset_ps
        return np.rint(local).astype(np.int64)


def local_clock(t_true_ps: int, model: OscillatorModel, state: ClockState) -> int:
    """Scalar form of the clock mapping (see ClockState.local)."""
    assert state.model is model or state.model == model
    return int(state.local(np.asarray([t_true_ps]))[0])


@dataclass
class TagStream:
    """One device's output: tag and PPS records sorted by local timestamp."""

    kind: np.ndarray        # uint8, KIND_TAG or KIND_PPS
    channel: np.ndarray     # uint16 (PPS_CHANNEL for PPS rows)
    t_local: np.ndarray     # int64 ps
    abs_second: np.ndarray  # int64, valid for PPS rows only (-1 elsewhere)

    def __len__(self) -> int:
        return len(self.kind)

    @property
    def n_pps(self) -> int:
        return int(np.count_nonzero(self.kind == KIND_PPS))

    @property
    def n_tags(self) -> int:
        return len(self) - self.n_pps

    def iter_events(self) -> Iterator[Union[RawTag, PpsEpoch]]:
        for k, ch, t, s in zip(self.kind, self.channel, self.t_local, self.abs_second):
            if k == KIND_PPS:
                yield PpsEpoch(abs_second=int(s), t_local=int(t))
            else:
                yield RawTag(channel=int(ch), t_local=int(t))

    @classmethod
    def from_events(cls, events) -> "TagStream":
        kind, channel, t_local, abs_second = [], [], [], []
        for ev in events:
            if isinstance(ev, PpsEpoch):
                kind.append(KIND_PPS)
                channel.append(PPS_CHANNEL)
                t_local.append(ev.t_local)
                abs_second.append(ev.abs_second)
            else:
                kind.append(KIND_TAG)
                channel.append(ev.channel)
                t_local.append(ev.t_local)
                abs_second.append(-1)
        return cls(
            kind=np.asarray(kind, dtype=np.uint8),
            channel=np.asarray(channel, dtype=np.uint16),
            t_local=np.asarray(t_local, dtype=np.int64),
            abs_second=np.asarray(abs_second, dtype=np.int64),
        )


@dataclass
class GroundTruth:
    """Oracle record of everything the simulator did."""

    emission_ps: np.ndarray      # float64 true emission time of each pair
    detected_a: np.ndarray       # bool, pair seen by Alice
    detected_b: np.ndarray       # bool, pair seen by Bob
    arrival_a_ps: np.ndarray     # float64 true arrival at Alice (valid where detected)
    arrival_b_ps: np.ndarray
    source_a: np.ndarray         # int64 per stream-a row: pair index, SOURCE_DARK or SOURCE_PPS
    source_b: np.ndarray
    clock_a: ClockState
    clock_b: ClockState

    @property
    def n_pairs(self) -> int:
        return len(self.emission_ps)

    @property
    def coincident(self) -> np.ndarray:
        return self.detected_a & self.detected_b


def _substreams(seed: int, names: tuple) -> dict:
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(child) for name, child in zip(names, children)}


_STREAM_NAMES = (
    "emission", "thin_a", "thin_b", "jitter_a", "jitter_b",
    "dark_a", "dark_b", "walk_a", "walk_b", "pps_a", "pps_b",
)


def simulate(config: ScenarioConfig):
    """Run the scenario; returns (stream_a, stream_b, truth)."""
    config.validate()
    rngs = _substreams(config.seed, _STREAM_NAMES)
    span_ps = config.duration_s * PS_PER_SECOND

    # Pair emissions: homogeneous Poisson process over the run.
    n_pairs = int(rngs["emission"].poisson(config.pair_rate_hz * config.duration_s))
    emission = np.sort(rngs["emission"].random(n_pairs) * span_ps)

    detected_a = rngs["thin_a"].random(n_pairs) < config.eff_a
    detected_b = rngs["thin_b"].random(n_pairs) < config.eff_b
    arrival_a = emission + config.delay_a_ps + rngs["jitter_a"].normal(0.0, config.jitter_a_ps or 0.0, n_pairs) \
        if config.jitter_a_ps > 0 else emission + config.delay_a_ps
    arrival_b = emission + config.delay_b_ps + rngs["jitter_b"].normal(0.0, config.jitter_b_ps or 0.0, n_pairs) \
        if config.jitter_b_ps > 0 else emission + config.delay_b_ps

    clock_a = ClockState.generate(config.osc_a, config.duration_s, rngs["walk_a"])
    clock_b = ClockState.generate(config.osc_b, config.duration_s, rngs["walk_b"])

    stream_a, source_a = _build_stream(
        arrival_a[detected_a], np.flatnonzero(detected_a), config.channel_a,
        config.dark_rate_a_hz, span_ps, config, clock_a, rngs["dark_a"], rngs["pps_a"],
    )
    stream_b, source_b = _build_stream(
        arrival_b[detected_b], np.flatnonzero(detected_b), config.channel_b,
        config.dark_rate_b_hz, span_ps, config, clock_b, rngs["dark_b"], rngs["pps_b"],
    )

    truth = GroundTruth(
        emission_ps=emission,
        detected_a=detected_a,
        detected_b=detected_b,
        arrival_a_ps=arrival_a,
        arrival_b_ps=arrival_b,
        source_a=source_a,
        source_b=source_b,
        clock_a=clock_a,
        clock_b=clock_b,
    )
    return stream_a, stream_b, truth


def _build_stream(arrivals_true, pair_indices, channel, dark_rate_hz, span_ps,
                  config, clock, rng_dark, rng_pps):
    n_dark = int(rng_dark.poisson(dark_rate_hz * config.duration_s)) if dark_rate_hz > 0 else 0
    dark_true = np.sort(rng_dark.random(n_dark) * span_ps)

    n_pps = config.duration_s + 1
    pps_true = np.arange(n_pps, dtype=np.float64) * PS_PER_SECOND
    if config.pps_jitter_ps > 0:
        pps_true = pps_true + rng_pps.normal(0.0, config.pps_jitter_ps, n_pps)
    pps_abs = config.abs_second0 + np.arange(n_pps, dtype=np.int64)

    t_true = np.concatenate([arrivals_true, dark_true, pps_true])
    kind = np.concatenate([
        np.zeros(len(arrivals_true) + n_dark, dtype=np.uint8),
        np.full(n_pps, KIND_PPS, dtype=np.uint8),
    ])
    channels = np.concatenate([
        np.full(len(arrivals_true) + n_dark, channel, dtype=np.uint16),
        np.full(n_pps, PPS_CHANNEL, dtype=np.uint16),
    ])
    abs_second = np.concatenate([
        np.full(len(arrivals_true) + n_dark, -1, dtype=np.int64),
        pps_abs,
    ])
    source = np.concatenate([
        pair_indices.astype(np.int64),
        np.full(n_dark, SOURCE_DARK, dtype=np.int64),
        np.full(n_pps, SOURCE_PPS, dtype=np.int64),
    ])

    t_local = clock.local(t_true)
    # Sort by local time; PPS before tags on exact ties (closed-left intervals).
    order = np.lexsort((kind != KIND_PPS, t_local))
    stream = TagStream(
        kind=kind[order], channel=channels[order],
        t_local=t_local[order], abs_second=abs_second[order],
    )
    return stream, source[order]
