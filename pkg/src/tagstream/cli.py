"""Operator surface: simulate, run agents, analyze coincidences, report.

Every command is deterministic given its seed and inputs; live pacing (one
simulated second per wall second) is optional and off under
``--as-fast-as-possible``.

Exit codes: 0 success, 2 config/usage error, 3 I/O or missing artifact,
4 connection/protocol error, 5 empty overlap between the two streams.
"""

from __future__ import annotations

import argparse
import json
import math
import re
import sys
import threading
import time
from pathlib import Path

import numpy as np

from . import clocksim, codec, coincidence, measureplane, ttagent, ttraw
from .timebase import PS_PER_SECOND

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_PROTOCOL = 4
EXIT_EMPTY_OVERLAP = 5

#: Uncompressed vendor-format baseline used for reduction reporting.
RAW_BASELINE_BYTES_PER_TAG = 14.32

_UNIT_PS = {"ps": 1, "ns": 10**3, "us": 10**6, "ms": 10**9, "s": 10**12}


class CliError(Exception):
    def __init__(self, message: str, exit_code: int = EXIT_CONFIG):
        super().__init__(message)
        self.exit_code = exit_code


def parse_duration_ps(text: str) -> int:
    """Parse '10ns', '7us', '100ps', or a bare picosecond count."""
    m = re.fullmatch(r"\s*(\d+(?:\.\d+)?)\s*(ps|ns|us|ms|s)?\s*", text)
    if not m:
        raise CliError(f"cannot parse duration {text!r}")
    value = float(m.group(1)) * _UNIT_PS[m.group(2) or "ps"]
    if value != int(value):
        raise CliError(f"duration {text!r} is not an integer picosecond count")
    return int(value)


def parse_window(text: str) -> int:
    """FULL coincidence window -> half-window in ps ('10ns' -> 5000)."""
    full = parse_duration_ps(text)
    if full <= 0 or full % 2:
        raise CliError(f"window must be a positive even picosecond count, got {full}")
    return full // 2


# --- simulate ---------------------------------------------------------------

def write_truth(path, truth: clocksim.GroundTruth):
    np.savez_compressed(
        path,
        emission_ps=truth.emission_ps,
        detected_a=truth.detected_a,
        detected_b=truth.detected_b,
        arrival_a_ps=truth.arrival_a_ps,
        arrival_b_ps=truth.arrival_b_ps,
        source_a=truth.source_a,
        source_b=truth.source_b,
        walk_a=truth.clock_a.walk_ps,
        walk_b=truth.clock_b.walk_ps,
    )


def cmd_simulate(args) -> int:
    try:
        if args.scenario:
            config = clocksim.ScenarioConfig.from_file(args.scenario)
        else:
            config = clocksim.default_scenario()
        if args.seed is not None:
            config = clocksim.ScenarioConfig.from_dict(
                {**config.to_dict(), "seed": args.seed})
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read scenario: {exc}", EXIT_IO)
    except (clocksim.ConfigError, TypeError) as exc:
        raise CliError(f"bad scenario: {exc}", EXIT_CONFIG)

    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    stream_a, stream_b, truth = clocksim.simulate(config)
    ttraw.write_ttraw(outdir / "lab_a.ttraw", stream_a)
    ttraw.write_ttraw(outdir / "lab_b.ttraw", stream_b)
    write_truth(outdir / "truth.npz", truth)
    config.to_file(outdir / "scenario.json")

    dur = max(config.duration_s, 1)
    for name, stream, rate in (
        ("a", stream_a, config.pair_rate_hz * config.eff_a + config.dark_rate_a_hz),
        ("b", stream_b, config.pair_rate_hz * config.eff_b + config.dark_rate_b_hz),
    ):
        observed = stream.n_tags / dur
        sigma = math.sqrt(rate / dur) if rate else 0.0
        flag = "ok" if abs(observed - rate) <= 3 * sigma + 1e-9 else "OUTSIDE 3-sigma"
        print(f"lab_{name}: {stream.n_tags} tags, {stream.n_pps} pps, "
              f"{observed:.1f}/s vs expected {rate:.1f}/s ({flag})")
    return EXIT_OK


# --- agent ------------------------------------------------------------------

def start_agent(stream: clocksim.TagStream, channels, host="127.0.0.1", port=0,
                pace: bool = False, max_lag_seconds=None):
    """Run the pipeline into a BlockStore and serve it; returns (server, counters_box).

    The pipeline runs in a background thread; the store is closed when the
    input stream is exhausted. With ``pace`` the feed advances one simulated
    second per wall second.
    """
    store = measureplane.BlockStore(channels, max_lag_seconds=max_lag_seconds)
    counters_box = {}

    def run():
        try:
            blocks, counters = ttagent.run_pipeline(stream, channels)
            counters_box["counters"] = counters
            for block in blocks:
                store.append(block)
                if pace and block.channel == max(channels):
                    time.sleep(1.0)
        finally:
            store.close()

    thread = threading.Thread(target=run, daemon=True)
    server = measureplane.serve(store, host=host, port=port)
    thread.start()
    counters_box["thread"] = thread
    return server, counters_box


def cmd_agent(args) -> int:
    path = Path(args.input)
    if not path.exists():
        raise CliError(f"no such input {path}", EXIT_IO)
    try:
        stream = ttraw.read_ttraw(path)
    except ttraw.TtrawError as exc:
        raise CliError(f"malformed input: {exc}", EXIT_IO)
    channels = [int(c) for c in args.channels.split(",")]
    host, _, port = args.listen.rpartition(":")
    try:
        server, box = start_agent(stream, channels, host=host or "127.0.0.1",
                                  port=int(port), pace=args.pace,
                                  max_lag_seconds=args.buffer_seconds)
    except OSError as exc:
        raise CliError(f"cannot bind {args.listen}: {exc}", EXIT_PROTOCOL)
    print(f"tt-agent serving on {server.endpoint}; channels {channels}; "
          f"resolution 1 ps; codecs {list(codec.KNOWN_CODECS)}")
    try:
        box["thread"].join()
        counters = box.get("counters")
        if counters:
            print(f"pipeline done: {counters.tags_in} tags in, "
                  f"{counters.blocks_out} blocks, {counters.discarded} discarded, "
                  f"{counters.gap_invalid_seconds} gap-invalid seconds")
        while True:
            time.sleep(0.5)
    except KeyboardInterrupt:
        print("shutting down")
    finally:
        server.stop()
    return EXIT_OK


# --- coincide ---------------------------------------------------------------

def analyze(blocks_a, blocks_b, half_window_ps, bin_width_ps, auto_comp=True):
    """Coincidence analysis shared by cmd_coincide and run_end_to_end.

    Returns (comps, per_second_histograms, accumulated, rate_report, peak)
    where peak is None if no significant peak exists.
    """
    comps = ()
    if auto_comp:
        comps = (coincidence.auto_compensate(blocks_a, blocks_b),)
    result = coincidence.match_coincidences(blocks_a, blocks_b, comps,
                                            half_window_ps=half_window_ps)
    pair_secs = result.pair_seconds()
    per_second = {}
    for sec in sorted(set(int(s) for s in pair_secs)):
        per_second[sec] = coincidence.histogram(
            result.dt[pair_secs == sec], bin_width_ps, half_window_ps,
            abs_seconds_covered=(sec,))
    accumulated = coincidence.empty_histogram(bin_width_ps, half_window_ps)
    for h in per_second.values():
        accumulated = coincidence.accumulate(accumulated, h)
    singles = {}
    for b in list(blocks_a) + list(blocks_b):
        singles.setdefault(b.channel, {}).setdefault(b.abs_second, 0)
        singles[b.channel][b.abs_second] += b.count
    pairs_per_second = {int(s): int(n) for s, n in
                        zip(*np.unique(pair_secs, return_counts=True))} if result.n_pairs else {}
    report = coincidence.coincidence_rate(pairs_per_second, singles)
    try:
        peak = coincidence.find_peak(accumulated)
    except coincidence.NoSignalError:
        peak = None
    return comps, per_second, accumulated, report, peak


def write_analysis(outdir: Path, comps, per_second, accumulated, report, peak,
                   bytes_per_tag=None, svg: bool = False):
    outdir.mkdir(parents=True, exist_ok=True)
    per_dir = outdir / "per_second"
    per_dir.mkdir(exist_ok=True)
    for sec, h in per_second.items():
        (per_dir / f"hist_s{sec:06d}.csv").write_text(coincidence.histogram_csv(h))
    (outdir / "accumulated.csv").write_text(coincidence.histogram_csv(accumulated))
    (outdir / "rates.csv").write_text(coincidence.rates_csv(report))
    mean_ratio = float(np.nanmean(report.ratio)) if len(report.ratio) else float("nan")
    summary = {
        "compensation": [{"channel": c.channel, "delay_ps": c.delay_ps} for c in comps],
        "total_pairs": int(accumulated.total_pairs),
        "seconds_analyzed": len(per_second),
        "peak_center_ps": None if peak is None else peak.center_ps,
        "peak_height": None if peak is None else peak.height,
        "peak_rms_ps": None if peak is None else peak.rms_width_ps,
        "mean_coincidence_ratio": None if math.isnan(mean_ratio) else mean_ratio,
        "bin_width_ps": accumulated.bin_width_ps,
        "half_window_ps": accumulated.half_window_ps,
        "bytes_per_tag_received": bytes_per_tag,
    }
    (outdir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if svg:
        svg_histogram(accumulated, outdir / "accumulated.svg",
                      title="Accumulated coincidence histogram", peak=peak)
    return summary


def cmd_coincide(args) -> int:
    half_window = parse_window(args.window)
    request = measureplane.MeasurementRequest(
        start_abs_second=args.start, end_abs_second=args.end,
        channels=tuple(int(c) for c in args.channels.split(",")) if args.channels else (),
        codec_id=args.codec,
    )
    # The two endpoints may expose different channels; when no explicit
    # channel list is given, each request defaults to what that agent advertises.
    fa, fb = _fetch_both_auto(args.endpoint_a, args.endpoint_b, request)

    outdir = Path(args.out)
    if not (set(b.abs_second for b in fa.blocks) & set(b.abs_second for b in fb.blocks)):
        outdir.mkdir(parents=True, exist_ok=True)
        (outdir / "accumulated.csv").write_text("bin_center_ps,count\n")
        (outdir / "rates.csv").write_text("abs_second,coincidences,max_singles,ratio\n")
        print("warning: no overlapping seconds between the two streams")
        return EXIT_EMPTY_OVERLAP

    comps, per_second, accumulated, report, peak = analyze(
        fa.blocks, fb.blocks, half_window, args.bin_width,
        auto_comp=args.auto_compensate)
    encoded = [codec.from_bytes(raw) for raw in fa.raw_blocks + fb.raw_blocks]
    try:
        bpt = float(codec.bytes_per_tag(encoded))
    except codec.UndefinedForEmptyError:
        bpt = None
    outdir.mkdir(parents=True, exist_ok=True)
    codec.write_ttb(outdir / "blocks_a.ttb", [codec.from_bytes(r) for r in fa.raw_blocks])
    codec.write_ttb(outdir / "blocks_b.ttb", [codec.from_bytes(r) for r in fb.raw_blocks])
    summary = write_analysis(outdir, comps, per_second, accumulated, report, peak,
                             bytes_per_tag=bpt, svg=args.svg)
    if peak is not None:
        print(f"peak at {peak.center_ps:.1f} ps (height {peak.height}, "
              f"rms {peak.rms_width_ps:.1f} ps)")
    print(f"{accumulated.total_pairs} pairs over {len(per_second)} seconds; "
          f"bytes/tag received: {bpt if bpt is None else f'{bpt:.2f}'}")
    return EXIT_OK


def _fetch_request(endpoint, request):
    try:
        return measureplane.fetch(endpoint, request, keep_raw=True)
    except (ConnectionError, OSError) as exc:
        raise CliError(f"cannot reach {endpoint}: {exc}", EXIT_PROTOCOL)
    except measureplane.ProtocolError as exc:
        raise CliError(f"protocol error from {endpoint}: {exc}", EXIT_PROTOCOL)


def _fetch_both_auto(endpoint_a, endpoint_b, request):
    """Fetch from both endpoints, defaulting each to its advertised channels."""
    out = []
    for endpoint in (endpoint_a, endpoint_b):
        req = request
        if not request.channels:
            adv = _advertised(endpoint)
            req = measureplane.MeasurementRequest(
                start_abs_second=request.start_abs_second,
                end_abs_second=request.end_abs_second,
                channels=adv.channels, codec_id=request.codec_id)
        out.append(_fetch_request(endpoint, req))
    return out[0], out[1]


def _advertised(endpoint) -> measureplane.Advertisement:
    import socket as _socket
    host, port = measureplane._parse_endpoint(endpoint)
    try:
        with _socket.create_connection((host, port)) as sock:
            stream = sock.makefile("rwb")
            msg = measureplane.read_message(stream)
            return measureplane.Advertisement.unpack(msg.body)
    except (ConnectionError, OSError) as exc:
        raise CliError(f"cannot reach {endpoint}: {exc}", EXIT_PROTOCOL)


# --- report -----------------------------------------------------------------

def cmd_report(args) -> int:
    rundir = Path(args.rundir)
    summary_path = rundir / "summary.json"
    if not summary_path.exists():
        raise CliError(f"missing {summary_path}", EXIT_IO)
    summary = json.loads(summary_path.read_text())

    lines = []
    baseline = args.baseline
    per_codec = {}
    for ttb in sorted(rundir.glob("*.ttb")):
        for eb in codec.read_ttb(ttb):
            agg = per_codec.setdefault(eb.codec_id, [0, 0])
            agg[0] += eb.total_bytes
            agg[1] += eb.count
    lines.append(f"raw vendor baseline: {baseline:.2f} bytes/tag")
    for codec_id, (nbytes, ntags) in sorted(per_codec.items()):
        if ntags == 0:
            continue
        bpt = nbytes / ntags
        reduction = (baseline - bpt) / baseline * 100
        lines.append(f"codec {codec_id}: {bpt:.2f} bytes/tag "
                     f"({reduction:.1f}% reduction vs baseline)")

    checks = []
    bpt = summary.get("bytes_per_tag_received")
    if bpt is not None:
        checks.append(("bytes/tag <= 4.5", bpt <= 4.5))
        checks.append(("reduction >= 68%", (baseline - bpt) / baseline >= 0.68))
    peak = summary.get("peak_center_ps")
    if peak is not None and summary.get("compensation"):
        checks.append(("post-compensation |peak| <= 100 ps", abs(peak) <= 100.0))

    print("\n".join(lines))
    print(f"total pairs: {summary.get('total_pairs')}; "
          f"seconds: {summary.get('seconds_analyzed')}; "
          f"mean ratio: {summary.get('mean_coincidence_ratio')}")
    for name, ok in checks:
        print(f"[{'PASS' if ok else 'FAIL'}] {name}")
    return EXIT_OK


# --- end-to-end orchestration ----------------------------------------------

def run_end_to_end(config: clocksim.ScenarioConfig, outdir,
                   window: str = "10ns", bin_width_ps: int = 100,
                   auto_comp: bool = True, codec_id: int = codec.DEFAULT_CODEC):
    """simulate -> two in-process agents -> fetch -> coincide -> artifacts.

    Deterministic for a fixed config; used by tests and scripted runs.
    Returns the summary dict.
    """
    outdir = Path(outdir)
    half_window = parse_window(window)
    stream_a, stream_b, truth = clocksim.simulate(config)
    server_a, box_a = start_agent(stream_a, [config.channel_a])
    server_b, box_b = start_agent(stream_b, [config.channel_b])
    try:
        fa = measureplane.fetch(server_a.endpoint, measureplane.MeasurementRequest(
            0, 0, (config.channel_a,), codec_id), keep_raw=True)
        fb = measureplane.fetch(server_b.endpoint, measureplane.MeasurementRequest(
            0, 0, (config.channel_b,), codec_id), keep_raw=True)
    finally:
        server_a.stop()
        server_b.stop()
    comps, per_second, accumulated, report, peak = analyze(
        fa.blocks, fb.blocks, half_window, bin_width_ps, auto_comp=auto_comp)
    encoded = [codec.from_bytes(r) for r in fa.raw_blocks + fb.raw_blocks]
    try:
        bpt = float(codec.bytes_per_tag(encoded))
    except codec.UndefinedForEmptyError:
        bpt = None
    outdir.mkdir(parents=True, exist_ok=True)
    codec.write_ttb(outdir / "blocks_a.ttb", [codec.from_bytes(r) for r in fa.raw_blocks])
    codec.write_ttb(outdir / "blocks_b.ttb", [codec.from_bytes(r) for r in fb.raw_blocks])
    return write_analysis(outdir, comps, per_second, accumulated, report, peak,
                          bytes_per_tag=bpt)


# --- minimal SVG ------------------------------------------------------------

def svg_histogram(h: coincidence.CoincidenceHistogram, path, title="", peak=None,
                  width=800, height=400):
    """Bare-bones bar rendering: axes, bars, optional peak annotation."""
    margin = 50
    plot_w, plot_h = width - 2 * margin, height - 2 * margin
    top = max(int(h.bins.max()), 1) if h.n_bins else 1
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" '
        f'y2="{height - margin}" stroke="black"/>',
    ]
    bar_w = plot_w / max(h.n_bins, 1)
    for i, n in enumerate(h.bins):
        if n == 0:
            continue
        bar_h = plot_h * int(n) / top
        x = margin + i * bar_w
        y = height - margin - bar_h
        parts.append(f'<rect x="{x:.2f}" y="{y:.2f}" width="{max(bar_w, 0.5):.2f}" '
                     f'height="{bar_h:.2f}" fill="steelblue"/>')
    parts.append(f'<text x="{margin}" y="{height - margin + 20}" font-size="11">'
                 f'{-h.half_window_ps} ps</text>')
    parts.append(f'<text x="{width - margin}" y="{height - margin + 20}" '
                 f'text-anchor="end" font-size="11">{h.half_window_ps} ps</text>')
    if peak is not None:
        px = margin + (peak.center_ps + h.half_window_ps) / (2 * h.half_window_ps) * plot_w
        parts.append(f'<line x1="{px:.2f}" y1="{margin}" x2="{px:.2f}" '
                     f'y2="{height - margin}" stroke="red" stroke-dasharray="4"/>')
        parts.append(f'<text x="{px:.2f}" y="{margin - 5}" text-anchor="middle" '
                     f'font-size="11" fill="red">peak {peak.center_ps:.0f} ps</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


# --- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tagstream",
                                     description="Distributed time-tagging toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a scenario, write .ttraw streams + truth")
    p.add_argument("--scenario", help="scenario JSON (default: built-in desk scenario)")
    p.add_argument("--seed", type=int, default=None, help="override scenario seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("agent", help="serve a .ttraw stream as a TT agent")
    p.add_argument("input", help=".ttraw file")
    p.add_argument("--listen", default="127.0.0.1:0", help="host:port to bind")
    p.add_argument("--channels", default="1", help="comma-separated channel ids")
    p.add_argument("--pace", action="store_true",
                   help="feed one simulated second per wall second")
    p.add_argument("--as-fast-as-possible", dest="pace", action="store_false")
    p.add_argument("--buffer-seconds", type=int, default=None,
                   help="overrun threshold for stalled consumers")
    p.set_defaults(func=cmd_agent)

    p = sub.add_parser("coincide", help="live coincidence analysis of two agents")
    p.add_argument("endpoint_a")
    p.add_argument("endpoint_b")
    p.add_argument("--window", default="10ns",
                   help="FULL coincidence window (e.g. 10ns)")
    p.add_argument("--bin-width", type=int, default=100, help="histogram bin, ps")
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--end", type=int, default=0, help="0 = live/open-ended")
    p.add_argument("--channels", default="", help="restrict to these channels")
    p.add_argument("--codec", type=int, default=codec.DEFAULT_CODEC)
    p.add_argument("--auto-compensate", action="store_true", default=True)
    p.add_argument("--no-auto-compensate", dest="auto_compensate", action="store_false")
    p.add_argument("--svg", action="store_true", help="render accumulated.svg")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_coincide)

    p = sub.add_parser("report", help="consolidated report over run artifacts")
    p.add_argument("rundir")
    p.add_argument("--baseline", type=float, default=RAW_BASELINE_BYTES_PER_TAG,
                   help="raw bytes/tag baseline for reduction reporting")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
