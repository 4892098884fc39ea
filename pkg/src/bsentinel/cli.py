"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage
error. ``BSENTINEL_LOG`` sets diagnostic verbosity (e.g. ``INFO``).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import metrics_report
from .digest_core import avalanche_study, summarize_divergence
from .errors import BSentinelError, ConfigError, InputError
from .events import EventLog
from .simnet import Simulation, challenge_message, load_scenario
from .supervisor import ReplicationMode, required_replicas
from .trace_replay import ReplayConfig, load_trace, replay, trace_from_log, write_trace

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

logger = logging.getLogger("bsentinel")


class UsageError(Exception):
    pass


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _report_name(fmt: str) -> str:
    return f"report.{fmt}"


def cmd_simulate(args) -> int:
    cfg = load_scenario(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.no_checksum:
        overrides["checksum_enabled"] = False
    if overrides:
        cfg = cfg.with_overrides(**overrides)
    sim = Simulation(cfg)
    sim.run()
    report = metrics_report.build_report(sim.log)
    out = _out_dir(args.out)
    sim.log.write(out / "eventlog.ndjson")
    metrics_report.emit(report, args.format, out / _report_name(args.format))
    if args.export_trace:
        write_trace(trace_from_log(sim.log), out / "trace.csv")
    det = report.detection
    print(f"ticks 0..{cfg.horizon}, {cfg.n} nodes, {report.challenges['issued']} challenges, "
          f"shutdowns {report.shutdowns or 'none'}")
    for mode, row in det.items():
        print(f"  {mode}: {row.detected}/{row.injected} detected")
    return EXIT_OK


def _replay_config(args) -> ReplayConfig:
    kw = {}
    if args.config:
        sc = load_scenario(args.config)
        kw.update(
            calibration_k=sc.calibration_rounds,
            alpha=sc.alpha,
            tolerance=sc.tolerance,
            interval_j=sc.interval_j,
            m_cap=sc.m_cap,
            q_limit=sc.q_limit,
            challenge_timeout_us=sc.challenge_timeout_us,
            replication_k=sc.replication_k,
        )
        kw["message_hex"] = challenge_message(sc).payload.hex()
    if args.calibration_k is not None:
        kw["calibration_k"] = args.calibration_k
    if args.message_hex is not None:
        kw["message_hex"] = args.message_hex or None
    return ReplayConfig(**kw)


def cmd_replay(args) -> int:
    rcfg = _replay_config(args)
    trace = load_trace(args.trace)
    result = replay(trace, rcfg)
    out = _out_dir(args.out)
    metrics_report.emit(result.report, args.format, out / _report_name(args.format))
    b = result.report.breakdown
    print(f"{len(trace)} records ({trace.skipped} skipped), {b.total} classified; "
          f"high+extreme {b.flagged_fraction:.2%} (high {b.high_share:.2%}, extreme {b.extreme_share:.2%})")
    return EXIT_OK


def cmd_avalanche(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    s = summarize_divergence(avalanche_study(args.trials, args.seed))
    print(f"trials {s.trials}  mean {s.mean:.4f}  min {s.minimum:.4f}  max {s.maximum:.4f}")
    return EXIT_OK


def cmd_replicas(args) -> int:
    if args.k < 0:
        raise UsageError("-k must be >= 0")
    print(f"{'mode':<24}replicas for k={args.k}")
    for mode in ReplicationMode:
        print(f"{mode.value:<24}{required_replicas(args.k, mode)}")
    return EXIT_OK


def cmd_report(args) -> int:
    log = EventLog.read(args.log)
    report = metrics_report.build_report(log)
    out = _out_dir(args.out)
    metrics_report.emit(report, args.format, out / _report_name(args.format))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bsentinel", description="Byzantine fault detection simulator")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a scenario config")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", default="out")
    s.add_argument("--format", choices=("json", "csv"), default="json")
    s.add_argument("--no-checksum", action="store_true", help="crash-only detector: heartbeats, no digests")
    s.add_argument("--export-trace", action="store_true", help="also write trace.csv")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("replay", help="replay a trace CSV through the detector")
    r.add_argument("--trace", required=True)
    r.add_argument("--config")
    r.add_argument("--out", default="out")
    r.add_argument("--format", choices=("json", "csv"), default="json")
    r.add_argument("--calibration-k", type=int)
    r.add_argument("--message-hex")
    r.set_defaults(func=cmd_replay)

    a = sub.add_parser("avalanche", help="single-bit-flip hex divergence study")
    a.add_argument("--trials", type=int, default=10_000)
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(func=cmd_avalanche)

    k = sub.add_parser("replicas", help="replica counts for k faults")
    k.add_argument("-k", type=int, required=True)
    k.set_defaults(func=cmd_replicas)

    m = sub.add_parser("report", help="rebuild a report from an event log")
    m.add_argument("--log", required=True)
    m.add_argument("--out", default="out")
    m.add_argument("--format", choices=("json", "csv"), default="json")
    m.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    level = getattr(logging, os.environ.get("BSENTINEL_LOG", "WARNING").upper(), logging.WARNING)
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    logger.setLevel(level)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (UsageError, ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BSentinelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
