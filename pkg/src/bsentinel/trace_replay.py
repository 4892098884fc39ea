"""Offline replay of cluster-trace style task records through the detector.

Trace files are CSV with the header::

    task_hash,node_id,timestamp_us,response_us,sched_class,digest_hex

``digest_hex`` may be empty (no digest recorded) and ``response_us`` may
be ``inf`` for a challenge that never got a reply. The first ``k``
records of each node calibrate its baseline; every later record is one
challenge evaluation.
"""

from __future__ import annotations

import base64
import csv
import hashlib
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from .delay_model import DEFAULT_ALPHA, DEFAULT_TOLERANCE, build_baseline
from .digest_core import ChallengeMessage, Digest128, md5_digest
from .errors import ConfigError, InputError
from .events import EventLog
from .metrics_report import MetricsReport, build_report
from .supervisor import (
    DEFAULT_INTERVAL,
    DEFAULT_M_CAP,
    DEFAULT_Q_LIMIT,
    DEFAULT_TIMEOUT_US,
    Reply,
    Supervisor,
    precompute,
)

logger = logging.getLogger(__name__)

HEADER = ("task_hash", "node_id", "timestamp_us", "response_us", "sched_class", "digest_hex")
US_PER_TICK = 1_000_000
MAX_MALFORMED_FRACTION = 0.10
CALIBRATION_CLASS = 0
CHALLENGE_CLASS = 3
DEFAULT_MESSAGE = ChallengeMessage(bytes(64))


@dataclass(frozen=True)
class TraceRecord:
    task_hash: str
    node_id: str
    timestamp_us: int
    response_us: float
    sched_class: int
    digest_hex: Optional[str] = None

    def row(self) -> list:
        return [
            self.task_hash,
            self.node_id,
            str(self.timestamp_us),
            repr(self.response_us),
            str(self.sched_class),
            self.digest_hex or "",
        ]


@dataclass
class Trace:
    records: list
    skipped: int = 0
    problems: list = field(default_factory=list)

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)


def _parse_row(row, last_ts) -> TraceRecord:
    if len(row) != len(HEADER):
        raise ValueError(f"expected {len(HEADER)} fields, got {len(row)}")
    task_hash, node_id, ts, resp, sched, digest = (c.strip() for c in row)
    if not task_hash or not node_id:
        raise ValueError("empty task hash or node id")
    ts = int(ts)
    if ts < 0:
        raise ValueError("negative timestamp")
    resp = float(resp)
    if not resp > 0 or math.isnan(resp):
        raise ValueError(f"response time must be positive, got {resp}")
    sched = int(sched)
    if digest:
        Digest128.from_hex(digest.lower())
        digest = digest.lower()
    if node_id in last_ts and ts < last_ts[node_id]:
        raise ValueError(f"timestamp goes backwards for node {node_id}")
    return TraceRecord(task_hash, node_id, ts, resp, sched, digest or None)


def load_trace(path) -> Trace:
    """Read and validate a trace file.

    Malformed rows are skipped and tallied; more than 10% malformed rows
    aborts with :class:`InputError`, as do a missing file and a wrong
    header.
    """
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot open trace {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(c.strip() for c in header) != HEADER:
            raise InputError(f"bad trace header {header!r}; expected {','.join(HEADER)}")
        trace = Trace([])
        last_ts = {}
        rows = 0
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            rows += 1
            try:
                rec = _parse_row(row, last_ts)
            except ValueError as exc:
                trace.skipped += 1
                trace.problems.append((lineno, str(exc)))
                continue
            last_ts[rec.node_id] = rec.timestamp_us
            trace.records.append(rec)
    if trace.skipped:
        logger.warning("skipped %d malformed trace rows of %d", trace.skipped, rows)
    if rows and trace.skipped / rows > MAX_MALFORMED_FRACTION:
        raise InputError(f"{trace.skipped} of {rows} rows malformed (limit 10%)")
    return trace


def write_trace(records: Iterable[TraceRecord], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADER)
        for rec in records:
            w.writerow(rec.row())
    return path


def _task_hash(*parts) -> str:
    # opaque id only; the protocol digest stays in digest_core
    raw = hashlib.blake2b(":".join(map(str, parts)).encode(), digest_size=12).digest()
    return base64.b64encode(raw).decode("ascii")


def trace_from_log(log: EventLog) -> list:
    """Turn a simulation log into trace records, one per challenge reply.

    Records are keyed by pool slot, so a replacement node continues the
    record stream of the node it replaced.
    """
    out = []
    for seq, ev in enumerate(log.of_kind("reply")):
        p = ev.payload
        calibration = p.get("phase") == "calibration"
        latency = p.get("latency_us")
        out.append(
            TraceRecord(
                task_hash=_task_hash(p["slot"], ev.tick, seq),
                node_id=str(p["slot"]),
                timestamp_us=ev.tick * US_PER_TICK,
                response_us=math.inf if latency is None else float(latency),
                sched_class=CALIBRATION_CLASS if calibration else CHALLENGE_CLASS,
                digest_hex=p.get("digest"),
            )
        )
    return out


# -- sampling ---------------------------------------------------------------

@dataclass(frozen=True)
class SamplingRatio:
    expected: int
    observed: int
    ratio: Optional[float]

    @property
    def missing(self) -> bool:
        return self.observed == 0


def sampling_ratio(observed: dict, horizon_us: int, nominal_interval_us: int = US_PER_TICK) -> dict:
    """Expected-to-observed sample ratio per node, plus ``"*"`` for the pool.

    A node with no observed samples gets ``ratio=None`` and reads as
    missing rather than raising.
    """
    if not nominal_interval_us > 0:
        raise ValueError("nominal interval must be positive")
    expected = horizon_us // nominal_interval_us
    out = {}
    for node, count in sorted(observed.items()):
        out[node] = SamplingRatio(expected, count, expected / count if count else None)
    total = sum(observed.values())
    pool_expected = expected * len(observed)
    out["*"] = SamplingRatio(pool_expected, total, pool_expected / total if total else None)
    return out


# -- replay -----------------------------------------------------------------

@dataclass(frozen=True)
class ReplayConfig:
    calibration_k: int = 10
    alpha: float = DEFAULT_ALPHA
    tolerance: float = DEFAULT_TOLERANCE
    interval_j: int = DEFAULT_INTERVAL
    m_cap: int = DEFAULT_M_CAP
    q_limit: int = DEFAULT_Q_LIMIT
    challenge_timeout_us: float = DEFAULT_TIMEOUT_US
    message_hex: Optional[str] = DEFAULT_MESSAGE.payload.hex()
    nominal_interval_us: int = US_PER_TICK
    replication_k: int = 1

    def __post_init__(self):
        if self.calibration_k < 1:
            raise ConfigError("calibration_k must be >= 1")

    def message(self) -> Optional[ChallengeMessage]:
        return None if self.message_hex is None else ChallengeMessage(bytes.fromhex(self.message_hex))

    @classmethod
    def from_meta(cls, meta: dict, **kw) -> "ReplayConfig":
        """Detector settings matching a simulation log header."""
        base = dict(
            interval_j=meta["interval_j"],
            m_cap=meta["m_cap"],
            q_limit=meta["q_limit"],
            challenge_timeout_us=meta["challenge_timeout_us"],
            message_hex=meta["message_hex"],
            replication_k=meta.get("replication_k", 1),
        )
        base.update(kw)
        return cls(**base)


@dataclass
class ReplayResult:
    report: MetricsReport
    log: EventLog
    final_states: dict
    excluded: list
    rejected: list


def replay(trace: Iterable[TraceRecord], config: ReplayConfig = ReplayConfig()) -> ReplayResult:
    """Run every post-calibration record through the supervisor logic.

    Digests are checked only on records that carry one, and only when a
    challenge message is configured; otherwise the replay is delay-only.
    """
    records = list(trace)
    k = config.calibration_k
    by_node = {}
    for rec in records:
        by_node.setdefault(rec.node_id, []).append(rec)
    excluded = sorted(n for n, rs in by_node.items() if len(rs) < k)
    nodes = [n for n in by_node if n not in set(excluded)]
    if not nodes:
        raise InputError(f"no node has the {k} records needed for calibration")

    message = config.message()
    has_digest = message is not None and any(r.digest_hex for r in records)
    ids = {name: i for i, name in enumerate(nodes)}

    def respond(node_idx, rnd):
        r = by_node[nodes[node_idx]][rnd]
        if math.isinf(r.response_us):
            return None
        digest = Digest128.from_hex(r.digest_hex) if (has_digest and r.digest_hex) else None
        return Reply(digest, r.response_us)

    sup_cfg = precompute(
        message if message is not None else DEFAULT_MESSAGE,
        range(len(nodes)),
        k,
        respond,
        alpha=config.alpha,
        tolerance=config.tolerance,
        interval_j=config.interval_j,
        challenge_timeout_us=config.challenge_timeout_us,
        m_cap=config.m_cap,
        q_limit=config.q_limit,
        checksum_enabled=has_digest,
    )
    rejected = [nodes[i] for i in sup_cfg.rejected]
    log = EventLog()
    sup = Supervisor(sup_cfg, log)
    current = {}
    for i, name in enumerate(nodes):
        if i in sup_cfg.rejected:
            continue
        current[name] = sup.admit(i, sup_cfg.baseline[i], tick=0, slot=name)
    next_id = len(nodes)

    tail = []
    for name, recs in by_node.items():
        if name in current:
            tail.extend((r.timestamp_us, ids[name], pos, r) for pos, r in enumerate(recs[k:]))
    tail.sort(key=lambda t: t[:3])
    first_ts = min((r.timestamp_us for r in records), default=0)
    last_ts = max((r.timestamp_us for r in records), default=0)

    for ts, _, _, r in tail:
        tick = ts // US_PER_TICK
        rec = current[r.node_id]
        sup.issue_challenge(rec, tick, "trace")
        if math.isinf(r.response_us):
            reply = None
        else:
            digest = Digest128.from_hex(r.digest_hex) if (has_digest and r.digest_hex) else None
            reply = Reply(digest, r.response_us)
        action = sup.checksum_challenge(rec, reply, tick)
        if action.is_shutdown:
            current[r.node_id] = sup.replace_node(rec, next_id, tick)
            next_id += 1

    horizon_us = last_ts - first_ts + config.nominal_interval_us
    counts = {name: len(by_node[name]) for name in current}
    ratios = sampling_ratio(counts, horizon_us, config.nominal_interval_us)
    pool = ratios["*"]
    log.meta = {
        "source": "trace",
        "n": len(current),
        "horizon": (last_ts - first_ts) // US_PER_TICK,
        "interval_j": config.interval_j,
        "m_cap": config.m_cap,
        "q_limit": config.q_limit,
        "expected_digest": sup_cfg.expected.hex if has_digest else None,
        "replication_k": config.replication_k,
    }
    stats = {
        "records": len(records),
        "excluded_nodes": len(excluded),
        "rejected_nodes": len(rejected),
        "checksum_metrics": has_digest,
        "collisions": sum(1 for e in log.of_kind("reply") if e.payload.get("match") is False) if has_digest else None,
        "sampling_expected": pool.expected,
        "sampling_observed": pool.observed,
        "sampling_ratio": pool.ratio,
        "missing_nodes": sum(1 for n, s in ratios.items() if n != "*" and s.missing),
    }
    report = build_report(log, stats)
    finals = {name: rec.state.value for name, rec in current.items()}
    return ReplayResult(report, log, finals, excluded, rejected)


# -- synthetic traces -------------------------------------------------------

def synthetic_trace(
    nodes: int,
    ticks: int,
    *,
    seed: int = 0,
    high_rate: float = 0.0,
    extreme_rate: float = 0.0,
    checksum_error_rate: float = 0.0,
    high_incidence: Optional[tuple] = None,
    calibration_k: int = 10,
    median_us: float = 100.0,
    spread: float = 0.1,
    alpha: float = DEFAULT_ALPHA,
    tolerance: float = DEFAULT_TOLERANCE,
    message: Optional[ChallengeMessage] = None,
    with_digest: bool = True,
) -> list:
    """Generate a trace with configured delay-class rates.

    Each node gets ``calibration_k`` records at its median, then one
    record per tick. A record is extreme with probability
    ``extreme_rate``, high with ``high_rate`` and otherwise at baseline.
    ``high_incidence=(mean, sd)`` instead draws a per-tick high fraction
    from a normal distribution and marks exactly that share of nodes
    high in the tick (no extremes). Latencies are placed well inside
    each band so the replay classifies them as generated.
    """
    if high_rate + extreme_rate > 1:
        raise ValueError("rates sum above 1")
    rng = random.Random(seed)
    message = message or DEFAULT_MESSAGE
    good = md5_digest(message)
    names = [f"n{i:04d}" for i in range(nodes)]
    medians = {nm: median_us * (1 + rng.uniform(-spread, spread)) for nm in names}
    out = []
    calib = {nm: [medians[nm] * (1 + rng.uniform(-0.002, 0.002)) for _ in range(calibration_k)] for nm in names}
    base = build_baseline(calib, alpha)
    hi_lo = base.upper_bound * 1.02
    hi_hi = base.supremum * 0.98

    def digest_for(bad: bool) -> Optional[str]:
        if not with_digest:
            return None
        return good.flip_bit(rng.randrange(128)).hex if bad else good.hex

    for nm in names:
        for r, t in enumerate(calib[nm]):
            out.append(TraceRecord(_task_hash(nm, 0, r), nm, 0, t, CALIBRATION_CLASS, digest_for(False)))
    for tick in range(1, ticks + 1):
        if high_incidence is not None:
            p = min(1.0, max(0.0, rng.gauss(*high_incidence)))
            high_now = set(rng.sample(names, int(round(p * nodes))))
        for nm in names:
            t_base = base[nm]
            if high_incidence is not None:
                level = "high" if nm in high_now else "normal"
            else:
                u = rng.random()
                level = "extreme" if u < extreme_rate else "high" if u < extreme_rate + high_rate else "normal"
            if level == "extreme":
                lat = base.supremum * (1 + rng.uniform(0.02, 0.5))
            elif level == "high":
                lat = rng.uniform(max(hi_lo, t_base * (1 + 2 * tolerance)), hi_hi)
            else:
                lat = t_base * (1 + rng.uniform(-tolerance / 3, tolerance / 3))
            bad = rng.random() < checksum_error_rate
            out.append(
                TraceRecord(_task_hash(nm, tick), nm, tick * US_PER_TICK, lat, CHALLENGE_CLASS, digest_for(bad))
            )
    return out
