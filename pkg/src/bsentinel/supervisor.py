"""Supervisor: calibration, challenge handling and adaptive intervals.

The supervisor owns one :class:`NodeRecord` per active node and mutates
them from a single thread. Each evaluation of a node goes

    monitor_tick -> checksum_challenge -> compare_delay_variation
                 -> checkpoint_optimize

and ends in an :class:`Action`. Shutdowns are reported, not executed:
the caller provisions the replacement and hands it to
:meth:`Supervisor.replace_node`.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

from .delay_model import (
    DEFAULT_ALPHA,
    DEFAULT_TOLERANCE,
    BaselineSet,
    DelayClass,
    build_baseline,
    classify_delay,
)
from .digest_core import ChallengeMessage, Digest128, Verdict, compare_digest_sets, md5_digest
from .errors import ConfigError, LifecycleError, SupervisorSuspect
from .events import EventLog
from .state_machine import S0, S1, S2, CombinedInput, NodeState, step_checksum, step_combined

logger = logging.getLogger(__name__)

DEFAULT_INTERVAL = 10
DEFAULT_M_CAP = 16
DEFAULT_Q_LIMIT = 3
DEFAULT_TIMEOUT_US = 5000.0


class ActionKind(enum.Enum):
    CONTINUE = "Continue"
    CHECKPOINT = "Checkpoint"
    SHUTDOWN_AND_REPLACE = "ShutdownAndReplace"
    SUPERVISOR_SUSPECT = "SupervisorSuspect"


class ShutdownReason(enum.Enum):
    CHECKSUM_ERROR = "checksum-error"
    EXTREME_DELAY = "extreme-delay"
    PERSISTENT_HIGH = "persistent-high"
    TIMEOUT = "timeout"


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    reason: Optional[ShutdownReason] = None

    def __post_init__(self):
        if (self.kind is ActionKind.SHUTDOWN_AND_REPLACE) != (self.reason is not None):
            raise ValueError("a reason is carried by ShutdownAndReplace and only by it")

    @property
    def is_shutdown(self) -> bool:
        return self.kind is ActionKind.SHUTDOWN_AND_REPLACE

    def __str__(self):
        return f"{self.kind.value}({self.reason.value})" if self.reason else self.kind.value


CONTINUE = Action(ActionKind.CONTINUE)
CHECKPOINT = Action(ActionKind.CHECKPOINT)
SUPERVISOR_SUSPECT = Action(ActionKind.SUPERVISOR_SUSPECT)


def shutdown(reason: ShutdownReason) -> Action:
    return Action(ActionKind.SHUTDOWN_AND_REPLACE, reason)


@dataclass(frozen=True)
class CheckpointToken:
    node_id: int
    captured_at: int
    payload: object = None


@dataclass(frozen=True)
class Reply:
    """A challenge reply. ``digest`` is None for a bare heartbeat."""

    digest: Optional[Digest128]
    latency_us: float


@dataclass
class NodeRecord:
    node_id: int
    baseline_us: float
    state: NodeState = S0
    m: int = 1
    q: int = 0
    checkpoint: Optional[CheckpointToken] = None
    next_due: int = 0
    slot: Optional[int] = None


@dataclass(frozen=True)
class SupervisorConfig:
    message: ChallengeMessage
    expected: Digest128
    baseline: BaselineSet
    qos_threshold_us: float
    interval_j: int = DEFAULT_INTERVAL
    alpha: float = DEFAULT_ALPHA
    tolerance: float = DEFAULT_TOLERANCE
    challenge_timeout_us: float = DEFAULT_TIMEOUT_US
    m_cap: int = DEFAULT_M_CAP
    q_limit: int = DEFAULT_Q_LIMIT
    checksum_enabled: bool = True
    rejected: tuple = ()

    def __post_init__(self):
        if self.expected != md5_digest(self.message):
            raise ConfigError("expected digest does not match the challenge message")
        if self.interval_j < 1:
            raise ConfigError("interval j must be >= 1")
        if not self.qos_threshold_us > 0:
            raise ConfigError("QoS threshold must be positive")
        if not self.challenge_timeout_us > 0:
            raise ConfigError("challenge timeout must be positive")
        if self.m_cap < 1:
            raise ConfigError("m cap must be >= 1")
        if self.q_limit < 1:
            raise ConfigError("q limit must be >= 1")
        if not 0 <= self.tolerance < 1:
            raise ConfigError("tolerance must lie in [0, 1)")


Responder = Callable[[int, int], Optional[Reply]]


def precompute(
    message: ChallengeMessage,
    node_ids: Iterable[int],
    rounds: int,
    respond: Responder,
    *,
    alpha: float = DEFAULT_ALPHA,
    tolerance: float = DEFAULT_TOLERANCE,
    qos_threshold_us: Optional[float] = None,
    interval_j: int = DEFAULT_INTERVAL,
    challenge_timeout_us: float = DEFAULT_TIMEOUT_US,
    m_cap: int = DEFAULT_M_CAP,
    q_limit: int = DEFAULT_Q_LIMIT,
    checksum_enabled: bool = True,
) -> SupervisorConfig:
    """Challenge every node ``rounds`` times and build the baseline set.

    ``respond(node_id, round)`` returns the node's :class:`Reply` or None
    on timeout. A node is admitted only if every calibration digest
    matches; the latencies of admitted nodes form the baseline. When no
    node agrees with the expected digest, :class:`SupervisorSuspect` is
    raised. A QoS threshold of None defaults to the supremum.
    """
    node_ids = list(node_ids)
    if not node_ids:
        raise ConfigError("precompute needs at least one node")
    if rounds < 1:
        raise ConfigError("calibration rounds must be >= 1")
    expected = md5_digest(message)
    samples = {nid: [] for nid in node_ids}
    rejected = set()
    for r in range(rounds):
        observed = []
        for nid in node_ids:
            if nid in rejected:
                continue
            reply = respond(nid, r)
            if reply is None or reply.latency_us > challenge_timeout_us:
                rejected.add(nid)
                continue
            samples[nid].append(reply.latency_us)
            if checksum_enabled and reply.digest is not None:
                observed.append((nid, reply.digest))
        if observed:
            cmp = compare_digest_sets(expected, observed)
            if cmp.verdict is Verdict.DISJOINT and len(rejected) + len(cmp.erroneous_ids) == len(node_ids):
                raise SupervisorSuspect(cmp.erroneous_ids)
            rejected |= cmp.erroneous_ids
    if len(rejected) == len(node_ids):
        raise ConfigError("no node passed calibration")
    for nid in sorted(rejected):
        logger.warning("node %s rejected at admission", nid)
    admitted = {nid: s for nid, s in samples.items() if nid not in rejected}
    baseline = build_baseline(admitted, alpha)
    return SupervisorConfig(
        message=message,
        expected=expected,
        baseline=baseline,
        qos_threshold_us=baseline.supremum if qos_threshold_us is None else qos_threshold_us,
        interval_j=interval_j,
        alpha=alpha,
        tolerance=tolerance,
        challenge_timeout_us=challenge_timeout_us,
        m_cap=m_cap,
        q_limit=q_limit,
        checksum_enabled=checksum_enabled,
        rejected=tuple(sorted(rejected)),
    )


class Supervisor:
    def __init__(self, config: SupervisorConfig, log: Optional[EventLog] = None):
        self.config = config
        self.log = log if log is not None else EventLog()
        self.records: dict = {}
        self.retired: set = set()

    # -- bookkeeping -------------------------------------------------

    def admit(self, node_id: int, baseline_us: float, tick: int = 0, slot: Optional[int] = None) -> NodeRecord:
        if node_id in self.records or node_id in self.retired:
            raise ValueError(f"node id {node_id} already used")
        rec = NodeRecord(node_id, baseline_us, next_due=tick + self.config.interval_j, slot=slot)
        self.records[node_id] = rec
        return rec

    def due(self, tick: int) -> list:
        return [r for r in self.records.values() if r.state is not S2 and tick >= r.next_due]

    def _emit(self, tick, rec, kind, **payload):
        if rec.slot is not None:
            payload["slot"] = rec.slot
        self.log.append(tick, rec.node_id, kind, **payload)

    def _move(self, rec: NodeRecord, nxt: NodeState, output: int, tick: int, cause: str):
        if nxt is not rec.state:
            self._emit(tick, rec, "transition", src=rec.state.value, dst=nxt.value, output=output, cause=cause)
            rec.state = nxt

    def _shutdown(self, rec: NodeRecord, reason: ShutdownReason, tick: int) -> Action:
        ck = rec.checkpoint
        self._emit(
            tick, rec, "shutdown",
            reason=reason.value,
            checkpoint_tick=None if ck is None else ck.captured_at,
        )
        return shutdown(reason)

    # -- monitoring --------------------------------------------------

    def capture_checkpoint(self, rec: NodeRecord, tick: int, payload=None, cause: str = "scheduled") -> CheckpointToken:
        rec.checkpoint = CheckpointToken(rec.node_id, tick, payload)
        self._emit(tick, rec, "checkpoint", position=payload, cause=cause)
        return rec.checkpoint

    def monitor_tick(self, rec: NodeRecord, response_time_us: float, tick: int, payload=None) -> Action:
        """SLA trigger: checkpoint and demand a challenge when QoS is breached."""
        if rec.state is S2:
            raise LifecycleError(f"node {rec.node_id} is fail-stop")
        if response_time_us >= self.config.qos_threshold_us:
            self.capture_checkpoint(rec, tick, payload, cause="qos-breach")
            return CHECKPOINT
        return CONTINUE

    def issue_challenge(self, rec: NodeRecord, tick: int, trigger: str = "scheduled") -> None:
        self._emit(tick, rec, "challenge", trigger=trigger, m=rec.m, q=rec.q, state=rec.state.value)

    # -- checksum challenge ------------------------------------------

    def checksum_challenge(self, rec: NodeRecord, reply: Optional[Reply], tick: int) -> Action:
        if rec.state is S2:
            raise LifecycleError(f"node {rec.node_id} is fail-stop")
        cfg = self.config
        if reply is None or reply.latency_us > cfg.challenge_timeout_us:
            self._emit(tick, rec, "reply", digest=None, latency_us=None if reply is None else reply.latency_us,
                       timeout=True, match=None)
            res = step_combined(rec.state, CombinedInput(delay_bit=1, checksum_bit=0))
            self._move(rec, res.next, res.output, tick, "timeout")
            return self._shutdown(rec, ShutdownReason.TIMEOUT, tick)
        match = None
        if cfg.checksum_enabled and reply.digest is not None:
            match = reply.digest == cfg.expected
        self._emit(
            tick, rec, "reply",
            digest=None if reply.digest is None else reply.digest.hex,
            latency_us=reply.latency_us, timeout=False, match=match,
        )
        if match is False:
            res = step_checksum(rec.state, 1)
            self._move(rec, res.next, res.output, tick, "checksum-error")
            return self._shutdown(rec, ShutdownReason.CHECKSUM_ERROR, tick)
        return self.compare_delay_variation(rec, reply.latency_us, tick)

    # -- delay variation ---------------------------------------------

    def compare_delay_variation(self, rec: NodeRecord, t_obs: float, tick: int) -> Action:
        cfg = self.config
        cls = classify_delay(t_obs, rec.baseline_us, cfg.baseline, cfg.tolerance)
        self._emit(tick, rec, "classify", delay_class=cls.label, latency_us=t_obs)
        if cls in (DelayClass.LOW, DelayClass.NORMAL):
            recovered = rec.state is S1
            res = step_combined(rec.state, CombinedInput.quiet())
            self._move(rec, res.next, res.output, tick, "recovery")
            return self.checkpoint_optimize(rec, tick, recovered=recovered)
        if cls is DelayClass.HIGH:
            res = step_combined(rec.state, CombinedInput(delay_bit=0, checksum_bit=0))
            self._move(rec, res.next, res.output, tick, "high-delay")
            return self.checkpoint_optimize(rec, tick, high=True)
        res = step_combined(rec.state, CombinedInput(delay_bit=1, checksum_bit=0))
        self._move(rec, res.next, res.output, tick, "extreme-delay")
        return self._shutdown(rec, ShutdownReason.EXTREME_DELAY, tick)

    # -- interval adaptation -----------------------------------------

    def checkpoint_optimize(self, rec: NodeRecord, tick: int, *, high: bool = False, recovered: bool = False) -> Action:
        """Reschedule ``rec`` after a non-fatal evaluation.

        Quiet S0 nodes stretch their interval j, 2j, 3j, ... up to the
        cap; a node just recovered from S1 restarts at j. S1 nodes are
        evaluated every j, and the q-th successive high interval at the
        q limit shuts the node down.
        """
        cfg = self.config
        if rec.state is S2:
            raise LifecycleError(f"node {rec.node_id} is fail-stop")
        if rec.state is S0:
            if recovered:
                rec.q = 0
                rec.m = 1
            else:
                rec.m = min(rec.m + 1, cfg.m_cap)
            rec.next_due = tick + rec.m * cfg.interval_j
            return CONTINUE
        rec.m = 1
        rec.next_due = tick + cfg.interval_j
        if high:
            rec.q += 1
        if rec.q >= cfg.q_limit:
            self._move(rec, S2, 1, tick, "persistent-high")
            return self._shutdown(rec, ShutdownReason.PERSISTENT_HIGH, tick)
        return CONTINUE

    # -- replacement -------------------------------------------------

    def replace_node(self, rec: NodeRecord, new_id: int, tick: int) -> NodeRecord:
        """Retire ``rec`` (must be S2) and admit ``new_id`` in its place.

        The fresh record inherits the baseline and slot and carries the
        old checkpoint so the workload resumes from it; without one the
        replacement is a cold restart.
        """
        if rec.state is not S2:
            raise LifecycleError(f"node {rec.node_id} is {rec.state.value}, not fail-stop")
        del self.records[rec.node_id]
        self.retired.add(rec.node_id)
        fresh = self.admit(new_id, rec.baseline_us, tick, slot=rec.slot)
        ck = rec.checkpoint
        fresh.checkpoint = ck
        self._emit(
            tick, rec, "replace",
            new_node=new_id,
            cold=ck is None,
            resume_tick=None if ck is None else ck.captured_at,
            resume_position=None if ck is None else ck.payload,
        )
        if ck is None:
            logger.info("node %s replaced by %s with a cold restart", rec.node_id, new_id)
        return fresh


# -- interval bookkeeping ------------------------------------------------

def adaptive_challenge_count(horizon: int, j: int, m_cap: int = DEFAULT_M_CAP) -> int:
    """Evaluations a quiet node receives in ticks ``0..horizon``.

    Due ticks are j, 3j, 6j, ... (triangular numbers times j) until the
    multiplier reaches ``m_cap``, then every ``m_cap * j``.
    """
    ramp_end = j * m_cap * (m_cap + 1) // 2
    if horizon < ramp_end:
        m = 0
        while j * (m + 1) * (m + 2) // 2 <= horizon:
            m += 1
        return m
    return m_cap + (horizon - ramp_end) // (m_cap * j)


def fixed_challenge_count(horizon: int, j: int) -> int:
    return horizon // j


class ReplicationMode(enum.Enum):
    CRASH = "crash"
    BYZANTINE_CLASSIC = "byzantine-classic"
    BYZANTINE_WITH_CHECKSUM = "byzantine-with-checksum"


def required_replicas(k: int, mode) -> int:
    """Replicas needed to tolerate ``k`` faults under ``mode``."""
    if k < 0:
        raise ValueError("k must be non-negative")
    mode = ReplicationMode(mode)
    if mode is ReplicationMode.BYZANTINE_CLASSIC:
        return 3 * k + 1
    # Checksum detection turns Byzantine faults into crash faults.
    return k + 1


def replication_table(k: int) -> dict:
    return {mode.value: required_replicas(k, mode) for mode in ReplicationMode}
