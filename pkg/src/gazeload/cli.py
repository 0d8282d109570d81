"""``gazeload`` command line: simulate | calibrate | stream (record) | replay | trace | analyze.

Exit codes: 0 success, 1 usage error, 2 runtime error. ``GAZELOAD_LOG`` sets
the default log level.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .analysis import StatsError, build_report, load_feature_table, write_report
from .calibration import CalibrationError, CalibrationProfile, Calibrator
from .estimator import DEFAULT_EMIT_RATE_HZ, DEFAULT_THRESHOLD
from .protocol import DeviceEndpoint, StreamError, iter_samples
from .runner import GlobalConfig, load_markers, replay_session, stream_session
from .session import (FormatError, OrderingError, Session, extract_event_trace,
                      write_estimates_csv, write_trace_csv)
from .simulator import FAST_SPEEDUP, ScenarioConfig, SimulatorServer

log = logging.getLogger("gazeload")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _endpoint(text: str) -> DeviceEndpoint:
    try:
        return DeviceEndpoint.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _bind(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host or not port.isdigit() or not 0 <= int(port) <= 65535:
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    return host, int(port)


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return v


def _tag(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    return key, value


def _mapping(text: str) -> tuple[str, dict[str, float]]:
    """``error_rate=low:0,high:1``"""
    tag, sep, rest = text.partition("=")
    if not sep or not tag:
        raise argparse.ArgumentTypeError(f"expected tag=value:number,..., got {text!r}")
    out = {}
    for item in rest.split(","):
        value, sep, num = item.rpartition(":")
        if not sep:
            raise argparse.ArgumentTypeError(f"bad mapping entry {item!r}")
        try:
            out[value] = float(num)
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad number in {item!r}") from None
    return tag, out


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--log-level", default=os.environ.get("GAZELOAD_LOG", "WARNING"),
                        help="logging level (default from GAZELOAD_LOG, else WARNING)")
    estim = _Parser(add_help=False)
    estim.add_argument("--emit-rate", type=float, default=DEFAULT_EMIT_RATE_HZ,
                       help="estimate emission rate in Hz (default %(default)s)")
    estim.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD,
                       help="high-load fraction of the running maximum (default %(default)s)")
    estim.add_argument("--quiet", action="store_true", help="suppress the live readout")
    estim.add_argument("--fixed-id", help="use this session id (for reproducible logs)")

    p = _Parser(prog="gazeload", description="Pupil-diameter cognitive load pipeline.")
    p.add_argument("--version", action="version", version=f"gazeload {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="run the synthetic eye tracker")
    s.add_argument("--bind", type=_bind, default=("127.0.0.1", 4999), help="addr:port")
    s.add_argument("--scenario", type=Path, help="scenario JSON file")
    s.add_argument("--seed", type=_u64, help="override the scenario seed")
    s.add_argument("--fast", action="store_true", help="run simulated time faster than wall time")
    s.add_argument("--speedup", type=float, default=FAST_SPEEDUP,
                   help="fast-clock speed factor (default %(default)s)")
    s.add_argument("--repeat", action="store_true", help="serve sessions until interrupted")

    c = sub.add_parser("calibrate", parents=[common], help="light-reflex calibration")
    c.add_argument("--device", type=_endpoint, required=True, help="addr:port")
    c.add_argument("--bright", type=float, default=5.0, help="bright phase seconds")
    c.add_argument("--dim", type=float, default=5.0, help="dim phase seconds")
    c.add_argument("--out", type=Path, required=True, help="profile JSON output")
    c.add_argument("--idle-timeout", type=float, default=3.0)

    for name in ("stream", "record"):
        st = sub.add_parser(name, parents=[common, estim],
                            help="record a live session" + (" (alias of stream)" if name == "record" else ""))
        st.add_argument("--device", type=_endpoint, required=True, help="addr:port")
        st.add_argument("--out", type=Path, required=True, help="session JSONL output")
        st.add_argument("--fast", action="store_true",
                        help="emit on the device sample clock (deterministic)")
        st.add_argument("--calibrate", action="store_true",
                        help="run light-reflex calibration before tracking")
        st.add_argument("--bright", type=float, default=5.0)
        st.add_argument("--dim", type=float, default=5.0)
        st.add_argument("--profile", type=Path, help="calibration profile JSON")
        st.add_argument("--duration", type=float, help="stop after this many device seconds")
        st.add_argument("--events", type=Path,
                        help="markers JSON ([{t, label}] or a scenario with 'markers')")
        st.add_argument("--stdin-events", action="store_true",
                        help="read event labels from stdin, one per line")
        st.add_argument("--tag", type=_tag, action="append", default=[],
                        help="condition tag key=value (repeatable)")
        st.add_argument("--csv", type=Path, help="also export estimates as CSV")
        st.add_argument("--idle-timeout", type=float, help="end after this many idle seconds")

    r = sub.add_parser("replay", parents=[common, estim], help="re-run the estimator on a session")
    r.add_argument("--session", type=Path, required=True)
    r.add_argument("--speed", type=float, default=1.0,
                   help="playback speed relative to real time; 0 = unpaced")
    r.add_argument("--out", type=Path, help="write the replayed session here")
    r.add_argument("--events", type=Path, help="extra markers JSON (seconds from session start)")
    r.add_argument("--csv", type=Path, help="export replayed estimates as CSV")

    t = sub.add_parser("trace", parents=[common], help="event-aligned trace extraction")
    t.add_argument("--session", type=Path, required=True)
    t.add_argument("--event", required=True, help="event label")
    t.add_argument("--window", type=float, default=5.0, help="half-window in seconds")
    t.add_argument("--which", choices=("samples", "estimates"), default="samples")
    t.add_argument("--out", type=Path, help="CSV output (default stdout)")

    a = sub.add_parser("analyze", parents=[common], help="correlate session features")
    a.add_argument("--sessions", type=Path, required=True, help="directory of *.jsonl sessions")
    a.add_argument("--x", required=True, help="feature name (peaks, duration, events:<label>, tag:<name>)")
    a.add_argument("--y", required=True)
    a.add_argument("--map", type=_mapping, action="append", default=[],
                   help="numeric coding of a tag, e.g. error_rate=low:0,high:1")
    a.add_argument("--out", type=Path, help="report JSON output (default stdout)")
    return p


def _config(args, clock_mode: str = "fast") -> GlobalConfig:
    return GlobalConfig(log_level=args.log_level, clock_mode=clock_mode,
                        emit_rate_hz=getattr(args, "emit_rate", DEFAULT_EMIT_RATE_HZ),
                        threshold_fraction=getattr(args, "threshold", DEFAULT_THRESHOLD))


def _readout(args):
    if args.quiet:
        return None
    return lambda line: print(line, flush=True)


def cmd_simulate(args) -> int:
    config = ScenarioConfig.load(args.scenario) if args.scenario else ScenarioConfig()
    if args.seed is not None:
        config = ScenarioConfig.from_dict({**config.to_dict(), "seed": args.seed})
    server = SimulatorServer(config, args.bind, fast=args.fast, speedup=args.speedup,
                             repeat=args.repeat).start()
    print(f"simulator listening on {args.bind[0]}:{server.port}", flush=True)
    try:
        while not server.finished:
            server.join(0.2)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
        server.join()
    print(f"sent {server.sent} sample datagrams", flush=True)
    return 0


def cmd_calibrate(args) -> int:
    cal = Calibrator(args.bright, args.dim)
    print(f"bright phase: {args.bright:g} s", flush=True)
    phase_dim = False
    for sample in iter_samples(args.device, idle_timeout=args.idle_timeout):
        if not phase_dim and cal.start_ts is not None and sample.ts - cal.start_ts >= cal.bright_us:
            print(f"dim phase: {args.dim:g} s", flush=True)
            phase_dim = True
        if cal.feed(sample):
            break
    profile = cal.profile()
    profile.save(args.out)
    print(f"d_min {profile.d_min:.3f} mm  d_max {profile.d_max:.3f} mm  "
          f"({profile.sample_counts[0]} bright / {profile.sample_counts[1]} dim frames)")
    return 0


def cmd_stream(args) -> int:
    config = _config(args, "fast" if args.fast else "wall")
    if args.profile and args.calibrate:
        raise UsageError("--profile and --calibrate are mutually exclusive")
    profile = CalibrationProfile.load(args.profile) if args.profile else None
    calibrator = Calibrator(args.bright, args.dim) if args.calibrate else None
    markers = load_markers(args.events) if args.events else ()
    summary = stream_session(
        args.device, args.out, config,
        idle_timeout=args.idle_timeout,
        stdin_events=sys.stdin if args.stdin_events else None,
        session_id=args.fixed_id, profile=profile, calibrator=calibrator,
        markers=markers, tags=dict(args.tag), duration=args.duration,
        readout=_readout(args))
    if args.csv:
        write_estimates_csv(Session.load(args.out).estimates, args.csv)
    stats = summary.stream_stats
    print(f"{summary.frames} frames, {summary.estimates} estimates, {summary.events} events; "
          f"{stats.errors} protocol errors, {stats.gaps} sequence gaps", file=sys.stderr)
    return 0


def cmd_replay(args) -> int:
    session = Session.load(args.session)
    markers = load_markers(args.events) if args.events else ()
    estimates, summary = replay_session(session, _config(args), out=args.out, speed=args.speed,
                                        markers=markers, session_id=args.fixed_id,
                                        readout=_readout(args))
    if args.csv:
        write_estimates_csv(estimates, args.csv)
    print(f"{summary.frames} frames, {summary.estimates} estimates", file=sys.stderr)
    return 0


def cmd_trace(args) -> int:
    session = Session.load(args.session)
    groups = extract_event_trace(session, args.event, args.window, args.which)
    write_trace_csv(groups, args.out if args.out else sys.stdout)
    if not groups:
        log.warning("no %r events in %s", args.event, args.session)
    return 0


def cmd_analyze(args) -> int:
    table = load_feature_table(args.sessions)
    report = build_report(table, args.x, args.y, dict(args.map))
    if args.out:
        write_report(report, args.out)
    else:
        print(json.dumps(report, indent=2))
    print(f"r = {report['r']:.4f}, n = {report['n']}, p = {report['p_two_tailed']:.4g}",
          file=sys.stderr)
    return 0


COMMANDS = {"simulate": cmd_simulate, "calibrate": cmd_calibrate, "stream": cmd_stream,
            "record": cmd_stream, "replay": cmd_replay, "trace": cmd_trace,
            "analyze": cmd_analyze}

RUNTIME_ERRORS = (StreamError, CalibrationError, FormatError, OrderingError, StatsError,
                  OSError, ValueError, RuntimeError)


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(str(exc))
        return 1
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        sys.stderr.write(f"gazeload: {exc}\n")
        return 1
    except RUNTIME_ERRORS as exc:
        sys.stderr.write(f"gazeload: error: {exc}\n")
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
