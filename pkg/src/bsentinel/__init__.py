"""Checksum-challenge and delay-variation detection of byzantine virtual nodes."""

from .delay_model import BaselineSet, DelayClass, build_baseline, classify_delay
from .digest_core import ChallengeMessage, Digest128, compare_digest_sets, hex_divergence, md5_digest
from .events import EventLog
from .metrics_report import MetricsReport, build_report
from .simnet import FaultMode, ScenarioConfig, Simulation, load_scenario, run_scenario
from .state_machine import NodeState, step_checksum, step_combined, step_delay
from .supervisor import ReplicationMode, Supervisor, precompute, required_replicas
from .trace_replay import ReplayConfig, load_trace, replay

__version__ = "0.1.0"

__all__ = [
    "BaselineSet", "ChallengeMessage", "DelayClass", "Digest128", "EventLog", "FaultMode",
    "MetricsReport", "NodeState", "ReplayConfig", "ReplicationMode", "ScenarioConfig",
    "Simulation", "Supervisor", "build_baseline", "build_report", "classify_delay",
    "compare_digest_sets", "hex_divergence", "load_scenario", "load_trace", "md5_digest",
    "precompute", "replay", "required_replicas", "run_scenario", "step_checksum",
    "step_combined", "step_delay",
]
