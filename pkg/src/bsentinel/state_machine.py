"""Three-state node lifecycle and its transition tables.

S0 is fail-safe, S1 Byzantine-prone and S2 fail-stop. S2 is absorbing:
leaving it takes a replacement node, never a transition.

The output bit marks a decisive step (checkpoint or shutdown path);
delay observations alone never set it.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

from .delay_model import DelayClass
from .errors import LifecycleError


class NodeState(enum.Enum):
    S0 = "S0"
    S1 = "S1"
    S2 = "S2"

    @property
    def description(self) -> str:
        return _DESCRIPTIONS[self]


_DESCRIPTIONS = {
    NodeState.S0: "fail-safe",
    NodeState.S1: "byzantine-prone",
    NodeState.S2: "fail-stop",
}

S0, S1, S2 = NodeState.S0, NodeState.S1, NodeState.S2


@dataclass(frozen=True)
class TransitionResult:
    next: NodeState
    output: int


@dataclass(frozen=True)
class CombinedInput:
    """Input to the checkpoint table.

    ``delay_bit`` is 0 for high and 1 for extreme; ``checksum_bit`` is 0
    for a clean digest and 1 for a mismatch. ``quiescent`` marks the
    no-input case (delay low/normal, digest clean) and overrides both.
    """

    delay_bit: int = 0
    checksum_bit: int = 0
    quiescent: bool = False

    @classmethod
    def quiet(cls) -> "CombinedInput":
        return cls(quiescent=True)

    @property
    def bits(self) -> Optional[str]:
        return None if self.quiescent else f"{self.delay_bit}{self.checksum_bit}"


# Rows are present states; columns are input codes.
DELAY_TABLE = {
    S0: {"00": S0, "01": S0, "10": S1, "11": S2},
    S1: {"00": S0, "01": S0, "10": S1, "11": S2},
}
DELAY_OUTPUT = {S0: 0, S1: 0}

CHECKSUM_TABLE = {
    S0: {"0": S0, "1": S2},
    S1: {"0": S0, "1": S2},
}
CHECKSUM_OUTPUT = {S0: 1, S1: 1}

COMBINED_TABLE = {
    S0: {"00": S1, "01": S2, "10": S2, "11": S2},
    S1: {"00": S1, "01": S2, "10": S2, "11": S2},
}
COMBINED_OUTPUT = {S0: 1, S1: 1}


def _require_live(state: NodeState):
    if state is S2:
        raise LifecycleError("S2 is absorbing; replace the node instead of stepping it")


def step_delay(state: NodeState, delay: DelayClass) -> TransitionResult:
    _require_live(state)
    return TransitionResult(DELAY_TABLE[state][delay.bits], DELAY_OUTPUT[state])


def step_checksum(state: NodeState, checksum: int) -> TransitionResult:
    _require_live(state)
    if checksum not in (0, 1):
        raise ValueError(f"checksum bit must be 0 or 1, got {checksum!r}")
    return TransitionResult(CHECKSUM_TABLE[state][str(checksum)], CHECKSUM_OUTPUT[state])


def step_combined(state: NodeState, inp: CombinedInput) -> TransitionResult:
    _require_live(state)
    if inp.quiescent:
        # S1 -> S0 is the recovery rule; S0 stays put.
        return TransitionResult(S0, 0)
    if inp.delay_bit not in (0, 1) or inp.checksum_bit not in (0, 1):
        raise ValueError(f"input bits must be 0/1, got {inp.bits}")
    return TransitionResult(COMBINED_TABLE[state][inp.bits], COMBINED_OUTPUT[state])


@dataclass
class SystemState:
    """Pool snapshot at tick t: one mode and one variable pair per node."""

    t: int
    modes: dict = field(default_factory=dict)
    variables: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.modes.keys() != self.variables.keys():
            raise ValueError("modes and variables must cover the same nodes")

    def __len__(self):
        return len(self.modes)
