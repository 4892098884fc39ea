"""Baseline response times and four-level delay classification.

Times are microseconds. A node's baseline is the median of its
calibration samples; the upper bound is the largest baseline in the
pool, and the supremum adds a margin ``z = ceil(alpha * upper_bound)``.
"""

from __future__ import annotations

import enum
import math
import statistics
from dataclasses import dataclass
from types import MappingProxyType
from typing import Mapping, Sequence

from .errors import ConfigError, DataError

DEFAULT_ALPHA = 0.5
DEFAULT_TOLERANCE = 0.01


class DelayClass(enum.IntEnum):
    """Delay variation level; the int value is its two-bit wire code."""

    LOW = 0b00
    NORMAL = 0b01
    HIGH = 0b10
    EXTREME = 0b11

    @property
    def bits(self) -> str:
        return format(int(self), "02b")

    @classmethod
    def from_bits(cls, bits: str) -> "DelayClass":
        return cls(int(bits, 2))

    @property
    def label(self) -> str:
        return self.name.lower()


@dataclass(frozen=True)
class BaselineSet:
    baselines: Mapping
    upper_bound: float
    z: float
    supremum: float
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        object.__setattr__(self, "baselines", MappingProxyType(dict(self.baselines)))

    def __getitem__(self, node_id):
        return self.baselines[node_id]

    def __contains__(self, node_id):
        return node_id in self.baselines

    def __len__(self):
        return len(self.baselines)


@dataclass(frozen=True)
class DelayObservation:
    node_id: object
    t_obs: float
    delay_class: DelayClass


def build_baseline(samples: Mapping[object, Sequence[float]], alpha: float = DEFAULT_ALPHA) -> BaselineSet:
    """Build the baseline set X from per-node calibration samples."""
    if not 0 < alpha < 1:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    if not samples:
        raise ConfigError("no calibration samples")
    baselines = {}
    for node_id, times in samples.items():
        times = list(times)
        if not times:
            raise ConfigError(f"node {node_id!r} has no calibration samples")
        if any(not (t > 0) or math.isinf(t) for t in times):
            raise ConfigError(f"node {node_id!r} has a non-positive or unbounded calibration time")
        baselines[node_id] = statistics.median(times)
    upper = max(baselines.values())
    z = float(math.ceil(alpha * upper))
    if not z < upper:
        # ceil can reach U only when U itself is below ~1/(1-alpha) us
        raise ConfigError(f"margin z={z} is not below upper bound {upper}; times too small for alpha={alpha}")
    return BaselineSet(baselines, upper, z, upper + z, alpha)


def classify_delay(
    t_obs: float,
    t_base: float,
    baseline: BaselineSet,
    tolerance: float = DEFAULT_TOLERANCE,
) -> DelayClass:
    # Checks run top-down; the (t_base, U) band that has no branch of its
    # own falls through to NORMAL.
    if not t_obs > 0:
        raise DataError(f"observed time must be positive, got {t_obs}")
    if t_obs >= baseline.supremum:
        return DelayClass.EXTREME
    if t_obs >= baseline.upper_bound and t_obs - t_base > t_base * tolerance:
        return DelayClass.HIGH
    if t_obs < t_base * (1 - tolerance):
        return DelayClass.LOW
    return DelayClass.NORMAL
