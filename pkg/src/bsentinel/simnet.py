"""Seeded discrete-event simulation of a supervised virtual node pool.

One tick is one second of simulated time; latencies are microseconds.
Every tick the supervisor sees each node's SLA response time (breaching
the QoS threshold forces an immediate checkpoint and challenge), and
nodes whose adaptive interval has elapsed get their scheduled
challenge. A single ``numpy`` generator seeded from the scenario drives
every random draw, so a (config, seed) pair fixes the event log.

Pool slots stay filled: a shutdown and its replacement land in the same
tick, and the replacement inherits the slot's hardware profile and
baseline.
"""

from __future__ import annotations

import configparser
import enum
import logging
import math
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .digest_core import ChallengeMessage, Digest128, md5_digest
from .errors import ConfigError, InjectionError
from .events import EventLog
from .supervisor import (
    DEFAULT_M_CAP,
    DEFAULT_Q_LIMIT,
    DEFAULT_TIMEOUT_US,
    ActionKind,
    Reply,
    Supervisor,
    precompute,
)

logger = logging.getLogger(__name__)


class FaultMode(enum.Enum):
    HEALTHY = "healthy"
    BYZANTINE_CORRUPT = "byzantine-corrupt"
    CONCEALED_MALICIOUS = "concealed-malicious"
    DEGRADED = "degraded"
    FAIL_STOP = "fail-stop"


@dataclass(frozen=True)
class Injection:
    mode: FaultMode
    fraction: float
    tick: int


@dataclass
class VirtualNode:
    node_id: int
    slot: int
    mu: float
    sigma: float
    mode: FaultMode = FaultMode.HEALTHY
    activated_at: int = 0
    degradation: float = 1.0
    extra_us: float = 0.0
    corrupt_bit: Optional[int] = None
    intra: bool = True
    retired: bool = False


@dataclass(frozen=True)
class TransientLink:
    p: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"link corruption probability must lie in [0, 1], got {self.p}")

    def transmit(self, digest: Digest128, rng: np.random.Generator) -> Digest128:
        if self.p > 0 and rng.random() < self.p:
            return digest.flip_bit(int(rng.integers(128)))
        return digest


@dataclass(frozen=True)
class ScenarioConfig:
    n: int = 10
    horizon: int = 1000
    seed: int = 0
    # latency model: slot medians are uniform in median * (1 +/- spread)
    latency_median_us: float = 100.0
    latency_spread: float = 0.1
    latency_sigma: float = 0.002
    degradation_factor: float = 1.4
    concealed_extra_us: Optional[float] = None
    injections: tuple = ()
    link_p: float = 0.0
    intra_fraction: float = 1.0
    # supervisor
    qos_threshold_us: Optional[float] = None
    interval_j: int = 10
    alpha: float = 0.5
    tolerance: float = 0.01
    challenge_timeout_us: float = DEFAULT_TIMEOUT_US
    m_cap: int = DEFAULT_M_CAP
    q_limit: int = DEFAULT_Q_LIMIT
    calibration_rounds: int = 10
    checksum_enabled: bool = True
    message_hex: Optional[str] = None
    # report
    replication_k: int = 1

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError("n must be >= 1")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if not self.latency_median_us > 0 or not self.latency_sigma >= 0:
            raise ConfigError("latency median must be positive and sigma non-negative")
        if not 0 <= self.latency_spread < 1:
            raise ConfigError("latency spread must lie in [0, 1)")
        if self.degradation_factor < 1:
            raise ConfigError("degradation factor must be >= 1")
        if not 0 <= self.intra_fraction <= 1:
            raise ConfigError("intra fraction must lie in [0, 1]")
        if self.calibration_rounds < 1:
            raise ConfigError("calibration rounds must be >= 1")
        if self.replication_k < 0:
            raise ConfigError("replication k must be >= 0")
        TransientLink(self.link_p)
        total = 0.0
        for inj in self.injections:
            if not isinstance(inj, Injection):
                raise ConfigError(f"bad injection entry {inj!r}")
            if not 0 <= inj.fraction <= 1:
                raise ConfigError(f"injection fraction {inj.fraction} outside [0, 1]")
            if not 0 <= inj.tick <= self.horizon:
                raise ConfigError(f"injection tick {inj.tick} outside horizon 0..{self.horizon}")
            total += inj.fraction
        if total > 1 + 1e-9:
            raise ConfigError(f"injection fractions sum to {total:.3f} > 1")
        if self.message_hex is not None:
            try:
                ChallengeMessage(bytes.fromhex(self.message_hex))
            except ValueError as exc:
                raise ConfigError(f"message_hex: {exc}") from exc

    def with_overrides(self, **kw) -> "ScenarioConfig":
        return replace(self, **kw)


def sample_response_time(node: VirtualNode, rng: np.random.Generator) -> float:
    """One response-time draw in microseconds; infinite for a fail-stop node."""
    if node.mode is FaultMode.FAIL_STOP:
        return math.inf
    return float(rng.lognormal(node.mu, node.sigma)) * node.degradation + node.extra_us


def node_respond_challenge(
    node: VirtualNode,
    message: ChallengeMessage,
    rng: np.random.Generator,
    heartbeat: bool = False,
) -> Optional[Reply]:
    """The node's answer to the challenge, or None if it stays silent.

    A Byzantine-corrupt node runs the message through its faulty compute
    path (one flipped input bit) and so returns a wrong digest. With
    ``heartbeat`` set no digest is computed at all.
    """
    if node.retired:
        raise InjectionError(f"node {node.node_id} is retired")
    if node.mode is FaultMode.FAIL_STOP:
        return None
    latency = sample_response_time(node, rng)
    if heartbeat:
        return Reply(None, latency)
    if node.mode is FaultMode.BYZANTINE_CORRUPT:
        return Reply(md5_digest(message.flip_bit(node.corrupt_bit)), latency)
    return Reply(md5_digest(message), latency)


def challenge_message(cfg: ScenarioConfig, rng: Optional[np.random.Generator] = None) -> ChallengeMessage:
    """The scenario's challenge M: explicit hex, else the first 64 bytes of the seeded stream."""
    if cfg.message_hex is not None:
        return ChallengeMessage(bytes.fromhex(cfg.message_hex))
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    return ChallengeMessage(rng.bytes(64))


class Simulation:
    """One scenario run. Build, call :meth:`run`, then read :attr:`log`."""

    def __init__(self, config: ScenarioConfig):
        self.cfg = cfg = config
        self.rng = np.random.default_rng(cfg.seed)
        self.link = TransientLink(cfg.link_p)
        self.message = challenge_message(cfg, self.rng)
        self.log = EventLog()
        n = cfg.n
        medians = cfg.latency_median_us * (1 + self.rng.uniform(-cfg.latency_spread, cfg.latency_spread, n))
        self.mu = np.log(medians)
        intra = self.rng.random(n) < cfg.intra_fraction
        self.nodes = [
            VirtualNode(node_id=s, slot=s, mu=float(self.mu[s]), sigma=cfg.latency_sigma, intra=bool(intra[s]))
            for s in range(n)
        ]
        self._next_id = n
        self.workload = np.zeros(n, dtype=np.int64)
        self.factor = np.ones(n)
        self.extra = np.zeros(n)
        self.dead = np.zeros(n, dtype=bool)
        self.next_due = np.zeros(n, dtype=np.int64)
        self.schedule = self._plan_injections()
        self.supervisor = self._calibrate()
        self.log.meta = self._meta()

    # -- setup -------------------------------------------------------

    def _plan_injections(self) -> dict:
        free = list(range(self.cfg.n))
        plan = {}
        for inj in self.cfg.injections:
            count = int(round(inj.fraction * self.cfg.n))
            if count > len(free):
                raise ConfigError("injections request more nodes than the pool holds")
            picks = self.rng.choice(len(free), size=count, replace=False)
            chosen = sorted(free[i] for i in picks)
            free = [s for s in free if s not in set(chosen)]
            for slot in chosen:
                plan.setdefault(inj.tick, []).append((slot, inj.mode))
        for tick in plan:
            plan[tick].sort()
        return plan

    def _calibrate(self) -> Supervisor:
        cfg = self.cfg

        # Calibration runs over the provisioning channel before service;
        # link faults and injections do not apply yet.
        def respond(node_id, rnd):
            node = self.nodes[node_id]
            reply = node_respond_challenge(node, self.message, self.rng, heartbeat=not cfg.checksum_enabled)
            self.log.append(
                0, node_id, "reply",
                phase="calibration", round=rnd, slot=node.slot,
                digest=None if reply is None or reply.digest is None else reply.digest.hex,
                latency_us=None if reply is None else reply.latency_us,
                timeout=reply is None, match=None,
            )
            return reply

        sup_cfg = precompute(
            self.message,
            range(cfg.n),
            cfg.calibration_rounds,
            respond,
            alpha=cfg.alpha,
            tolerance=cfg.tolerance,
            qos_threshold_us=cfg.qos_threshold_us,
            interval_j=cfg.interval_j,
            challenge_timeout_us=cfg.challenge_timeout_us,
            m_cap=cfg.m_cap,
            q_limit=cfg.q_limit,
            checksum_enabled=cfg.checksum_enabled,
        )
        if sup_cfg.rejected:
            # every node is honest at calibration, so this means the config is broken
            raise ConfigError(f"nodes {list(sup_cfg.rejected)} failed calibration")
        sup = Supervisor(sup_cfg, self.log)
        for node in self.nodes:
            rec = sup.admit(node.node_id, sup_cfg.baseline[node.node_id], tick=0, slot=node.slot)
            self.next_due[node.slot] = rec.next_due
        return sup

    def _meta(self) -> dict:
        sc = self.supervisor.config
        return {
            "n": self.cfg.n,
            "horizon": self.cfg.horizon,
            "seed": self.cfg.seed,
            "interval_j": sc.interval_j,
            "m_cap": sc.m_cap,
            "q_limit": sc.q_limit,
            "expected_digest": sc.expected.hex,
            "message_hex": sc.message.payload.hex(),
            "upper_bound_us": sc.baseline.upper_bound,
            "supremum_us": sc.baseline.supremum,
            "qos_threshold_us": sc.qos_threshold_us,
            "challenge_timeout_us": sc.challenge_timeout_us,
            "checksum_enabled": sc.checksum_enabled,
            "replication_k": self.cfg.replication_k,
            "source": "simnet",
        }

    # -- faults ------------------------------------------------------

    def node_by_id(self, node_id: int) -> VirtualNode:
        for node in self.nodes:
            if node.node_id == node_id:
                return node
        raise InjectionError(f"node {node_id} is not active")

    def inject_fault(self, node_id: int, mode: FaultMode, tick: int) -> None:
        if not 0 <= tick <= self.cfg.horizon:
            raise InjectionError(f"tick {tick} outside horizon")
        node = self.node_by_id(node_id)
        s = node.slot
        node.mode = mode
        node.activated_at = tick
        node.degradation = self.cfg.degradation_factor if mode is FaultMode.DEGRADED else 1.0
        node.extra_us = 0.0
        if mode is FaultMode.CONCEALED_MALICIOUS:
            extra = self.cfg.concealed_extra_us
            node.extra_us = self.supervisor.config.baseline.supremum if extra is None else extra
        if mode is FaultMode.BYZANTINE_CORRUPT:
            node.corrupt_bit = int(self.rng.integers(8 * 64))
        self.factor[s] = node.degradation
        self.extra[s] = node.extra_us
        self.dead[s] = mode is FaultMode.FAIL_STOP
        self.log.append(tick, node_id, "inject", mode=mode.value, slot=s)

    # -- main loop ---------------------------------------------------

    def run(self) -> EventLog:
        cfg = self.cfg
        qos = self.supervisor.config.qos_threshold_us
        for tick in range(cfg.horizon + 1):
            for slot, mode in self.schedule.get(tick, ()):
                self.inject_fault(self.nodes[slot].node_id, mode, tick)
            z = self.rng.standard_normal(cfg.n)
            response = np.exp(self.mu + cfg.latency_sigma * z) * self.factor + self.extra
            response[self.dead] = np.inf
            self.workload += 1
            hot = np.flatnonzero((self.next_due <= tick) | (response >= qos))
            for slot in hot:
                self._evaluate(int(slot), tick, float(response[slot]))
        return self.log

    def _evaluate(self, slot: int, tick: int, response_us: float) -> None:
        sup = self.supervisor
        node = self.nodes[slot]
        rec = sup.records[node.node_id]
        position = int(self.workload[slot])
        scheduled = tick >= rec.next_due
        if sup.monitor_tick(rec, response_us, tick, payload=position).kind is ActionKind.CONTINUE:
            sup.capture_checkpoint(rec, tick, position)
        sup.issue_challenge(rec, tick, "scheduled" if scheduled else "qos-breach")
        reply = node_respond_challenge(node, self.message, self.rng, heartbeat=not sup.config.checksum_enabled)
        if reply is not None and reply.digest is not None:
            reply = Reply(self.link.transmit(reply.digest, self.rng), reply.latency_us)
        action = sup.checksum_challenge(rec, reply, tick)
        if action.is_shutdown:
            rec = self._replace(node, rec, tick)
        self.next_due[slot] = rec.next_due

    def _replace(self, node: VirtualNode, rec, tick: int):
        node.retired = True
        new_id = self._next_id
        self._next_id += 1
        fresh = VirtualNode(new_id, node.slot, node.mu, node.sigma, intra=node.intra)
        self.nodes[node.slot] = fresh
        s = node.slot
        self.factor[s], self.extra[s], self.dead[s] = 1.0, 0.0, False
        new_rec = self.supervisor.replace_node(rec, new_id, tick)
        ck = new_rec.checkpoint
        self.workload[s] = 0 if ck is None else ck.payload
        return new_rec

    def final_states(self) -> dict:
        return {n.slot: self.supervisor.records[n.node_id].state.value for n in self.nodes}


def run_scenario(config: ScenarioConfig):
    """Run ``config`` to its horizon; returns ``(EventLog, MetricsReport)``."""
    from .metrics_report import build_report

    sim = Simulation(config)
    sim.run()
    return sim.log, build_report(sim.log)


# -- config files ---------------------------------------------------------

_SECTIONS = {
    "scenario": {"n": int, "horizon": int, "seed": int},
    "latency": {
        "median_us": ("latency_median_us", float),
        "spread": ("latency_spread", float),
        "sigma": ("latency_sigma", float),
        "degradation_factor": float,
        "concealed_extra_us": float,
    },
    "link": {"corruption_p": ("link_p", float), "intra_fraction": float},
    "supervisor": {
        "qos_threshold_us": float,
        "interval_j": int,
        "alpha": float,
        "tolerance": float,
        "challenge_timeout_us": float,
        "m_cap": int,
        "q_limit": int,
        "calibration_rounds": int,
        "checksum": ("checksum_enabled", "bool"),
        "message_hex": str,
    },
    "report": {"replication_k": int},
}


def parse_injections(mode: FaultMode, text: str) -> list:
    """Parse ``"0.05@100, 0.02@500"`` into injections for ``mode``."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            frac, tick = part.split("@")
            out.append(Injection(mode, float(frac), int(tick)))
        except ValueError as exc:
            raise ConfigError(f"bad injection {part!r} for {mode.value}; expected FRACTION@TICK") from exc
    return out


def scenario_from_ini(text: str) -> ScenarioConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unparseable config: {exc}") from exc
    kw = {}
    known_fields = {f.name for f in fields(ScenarioConfig)}
    for section in parser.sections():
        if section == "faults":
            continue
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        keys = _SECTIONS[section]
        for key, raw in parser.items(section):
            if key not in keys:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            target = keys[key]
            name, conv = target if isinstance(target, tuple) else (key, target)
            assert name in known_fields
            try:
                if raw.strip().lower() in ("", "auto", "none") and name in (
                    "qos_threshold_us", "concealed_extra_us", "message_hex",
                ):
                    kw[name] = None
                elif conv == "bool":
                    kw[name] = parser.getboolean(section, key)
                else:
                    kw[name] = conv(raw.strip())
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from exc
    injections = []
    if parser.has_section("faults"):
        for key, raw in parser.items("faults"):
            try:
                mode = FaultMode(key)
            except ValueError:
                raise ConfigError(f"unknown fault mode {key!r}") from None
            injections.extend(parse_injections(mode, raw))
    kw["injections"] = tuple(injections)
    return ScenarioConfig(**kw)


def load_scenario(path) -> ScenarioConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return scenario_from_ini(text)
