"""Aggregate event logs into figure-ready summaries.

Every function here is a pure reduction over an :class:`EventLog`; the
log header (``log.meta``) supplies pool size, horizon, interval and the
expected digest.
"""

from __future__ import annotations

import csv
import io
import json
import statistics
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from .digest_core import Digest128, hex_divergence
from .errors import OutputError
from .events import EventLog
from .supervisor import adaptive_challenge_count, fixed_challenge_count, replication_table

SCHEMA_VERSION = "1.0"
MIN_RANGE_TICKS = 30
DELAY_LEVELS = ("low", "normal", "high", "extreme")


@dataclass
class ModeDetection:
    injected: int = 0
    detected: int = 0
    rate: float = 0.0
    mean_latency_ticks: Optional[float] = None
    reasons: dict = field(default_factory=dict)


@dataclass
class DelayBreakdown:
    total: int = 0
    counts: dict = field(default_factory=lambda: dict.fromkeys(DELAY_LEVELS, 0))
    fractions: dict = field(default_factory=lambda: dict.fromkeys(DELAY_LEVELS, 0.0))
    # share of high+extreme among all classifications
    flagged_fraction: float = 0.0
    # split of the flagged share: high is the 0 input, extreme the 1 input
    high_share: float = 0.0
    extreme_share: float = 0.0


@dataclass
class ObservableRange:
    ticks: int = 0
    mean_pct: Optional[float] = None
    sd_pct: Optional[float] = None
    low_pct: Optional[float] = None
    high_pct: Optional[float] = None

    @property
    def defined(self) -> bool:
        return self.low_pct is not None


@dataclass
class MetricsReport:
    schema_version: str = SCHEMA_VERSION
    source: str = ""
    detection: dict = field(default_factory=dict)
    shutdowns: dict = field(default_factory=dict)
    challenges: dict = field(default_factory=dict)
    breakdown: DelayBreakdown = field(default_factory=DelayBreakdown)
    breakdown_excluding_checksum_errors: DelayBreakdown = field(default_factory=DelayBreakdown)
    divergence: dict = field(default_factory=dict)
    observable_range: ObservableRange = field(default_factory=ObservableRange)
    replication: dict = field(default_factory=dict)
    trace: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


# -- detection ----------------------------------------------------------

def detection_summary(log: EventLog) -> dict:
    """Per injected fault mode: detected/injected and mean ticks to shutdown."""
    injected = {}
    for ev in log.of_kind("inject"):
        if ev.payload["mode"] != "healthy":
            injected[ev.node] = (ev.payload["mode"], ev.tick)
    shutdown_at = {}
    for ev in log.of_kind("shutdown"):
        shutdown_at.setdefault(ev.node, (ev.tick, ev.payload["reason"]))
    out = {}
    for node, (mode, t0) in sorted(injected.items()):
        row = out.setdefault(mode, ModeDetection())
        row.injected += 1
        hit = shutdown_at.get(node)
        if hit is not None and hit[0] >= t0:
            row.detected += 1
            row.reasons[hit[1]] = row.reasons.get(hit[1], 0) + 1
            row.mean_latency_ticks = (row.mean_latency_ticks or 0.0) + (hit[0] - t0)
    for row in out.values():
        row.rate = row.detected / row.injected
        if row.detected:
            row.mean_latency_ticks /= row.detected
    return dict(sorted(out.items()))


# -- delay variation ------------------------------------------------------

def checksum_error_nodes(log: EventLog) -> set:
    return {ev.node for ev in log.of_kind("reply") if ev.payload.get("match") is False}


def _breakdown(classes) -> DelayBreakdown:
    counts = Counter(classes)
    b = DelayBreakdown()
    b.counts = {k: counts.get(k, 0) for k in DELAY_LEVELS}
    b.total = sum(b.counts.values())
    if b.total:
        b.fractions = {k: v / b.total for k, v in b.counts.items()}
    flagged = b.counts["high"] + b.counts["extreme"]
    if b.total:
        b.flagged_fraction = flagged / b.total
    if flagged:
        b.high_share = b.counts["high"] / flagged
        b.extreme_share = b.counts["extreme"] / flagged
    return b


def delay_variation_breakdown(log: EventLog) -> tuple:
    """(all classifications, classifications of nodes without checksum errors)."""
    bad = checksum_error_nodes(log)
    classify = log.of_kind("classify")
    everything = _breakdown(ev.payload["delay_class"] for ev in classify)
    clean = _breakdown(ev.payload["delay_class"] for ev in classify if ev.node not in bad)
    return everything, clean


def per_tick_high_incidence(log: EventLog) -> list:
    """Fraction of each tick's classifications that were high.

    Nodes that ever returned a wrong digest are left out entirely.
    Ticks without classifications are skipped.
    """
    bad = checksum_error_nodes(log)
    total = defaultdict(int)
    high = defaultdict(int)
    for ev in log.of_kind("classify"):
        if ev.node in bad:
            continue
        total[ev.tick] += 1
        if ev.payload["delay_class"] == "high":
            high[ev.tick] += 1
    return [high[t] / total[t] for t in sorted(total)]


def range_from_incidence(incidence) -> ObservableRange:
    incidence = list(incidence)
    rng = ObservableRange(ticks=len(incidence))
    if len(incidence) < MIN_RANGE_TICKS:
        return rng
    pct = [100.0 * x for x in incidence]
    mean = statistics.fmean(pct)
    sd = statistics.pstdev(pct)
    rng.mean_pct, rng.sd_pct = mean, sd
    rng.low_pct = min(100.0, max(0.0, mean - 2 * sd))
    rng.high_pct = min(100.0, max(0.0, mean + 2 * sd))
    return rng


def observable_range(log: EventLog) -> ObservableRange:
    """mean +/- 2 sd of the per-tick high incidence, in percent."""
    return range_from_incidence(per_tick_high_incidence(log))


# -- digests and challenges ----------------------------------------------

def divergence_summary(log: EventLog) -> dict:
    expected = log.meta.get("expected_digest")
    values = []
    if expected:
        ref = Digest128.from_hex(expected)
        for ev in log.of_kind("reply"):
            if ev.payload.get("match") is False and ev.payload.get("digest"):
                values.append(hex_divergence(ref, Digest128.from_hex(ev.payload["digest"])))
    if not values:
        return {"count": 0, "mean": 0.0, "min": 0.0, "max": 0.0}
    return {"count": len(values), "mean": statistics.fmean(values), "min": min(values), "max": max(values)}


def challenge_summary(log: EventLog) -> dict:
    meta = log.meta
    issued = len(log.of_kind("challenge"))
    n, horizon, j = meta.get("n", 0), meta.get("horizon", 0), meta.get("interval_j", 1)
    fixed = n * fixed_challenge_count(horizon, j)
    out = {
        "issued": issued,
        "fixed_interval_baseline": fixed,
        "reduction": 1.0 - issued / fixed if fixed else 0.0,
        "quiet_node_schedule": adaptive_challenge_count(horizon, j, meta.get("m_cap", 16)) if horizon else 0,
    }
    return out


def shutdown_counts(log: EventLog) -> dict:
    return dict(sorted(Counter(ev.payload["reason"] for ev in log.of_kind("shutdown")).items()))


def build_report(log: EventLog, trace_stats: Optional[dict] = None) -> MetricsReport:
    everything, clean = delay_variation_breakdown(log)
    return MetricsReport(
        source=log.meta.get("source", ""),
        detection=detection_summary(log),
        shutdowns=shutdown_counts(log),
        challenges=challenge_summary(log),
        breakdown=everything,
        breakdown_excluding_checksum_errors=clean,
        divergence=divergence_summary(log),
        observable_range=observable_range(log),
        replication=replication_table(log.meta.get("replication_k", 1)),
        trace=trace_stats or {},
    )


# -- output ---------------------------------------------------------------

def _flatten(obj, prefix=""):
    if isinstance(obj, dict):
        if not obj and prefix:
            yield prefix, ""
        for k in sorted(obj, key=str):
            yield from _flatten(obj[k], f"{prefix}.{k}" if prefix else str(k))
    else:
        yield prefix, obj


def _csv_value(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def render(report: MetricsReport, fmt: str = "json") -> str:
    data = report.to_dict()
    if fmt == "json":
        return json.dumps(data, sort_keys=True, indent=2) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["key", "value"])
        for key, value in _flatten(data):
            w.writerow([key, _csv_value(value)])
        return buf.getvalue()
    raise ValueError(f"unknown format {fmt!r}")


def emit(report: MetricsReport, fmt: str, path) -> Path:
    path = Path(path)
    try:
        path.write_text(render(report, fmt), encoding="utf-8")
    except OSError as exc:
        raise OutputError(f"cannot write report to {path}: {exc}") from exc
    return path


def flatten_report(report: MetricsReport) -> dict:
    return dict(_flatten(report.to_dict()))
