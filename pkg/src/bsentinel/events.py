"""Append-only event log with a deterministic NDJSON rendering."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

from .errors import InputError, OutputError

KINDS = frozenset(
    {"challenge", "reply", "classify", "transition", "checkpoint", "shutdown", "replace", "inject"}
)


@dataclass(frozen=True)
class Event:
    tick: int
    node: int
    kind: str
    payload: dict

    def to_json(self) -> str:
        return json.dumps(
            {"tick": self.tick, "node": self.node, "kind": self.kind, "payload": self.payload},
            sort_keys=True,
            separators=(",", ":"),
        )


@dataclass
class EventLog:
    """Ordered event records plus a metadata header.

    The header carries whatever a report needs beyond the events
    themselves (horizon, interval, expected digest, ...).
    """

    meta: dict = field(default_factory=dict)
    events: list = field(default_factory=list)
    _by_kind: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        for ev in self.events:
            self._by_kind.setdefault(ev.kind, []).append(ev)

    def append(self, tick: int, node: int, kind: str, **payload) -> Event:
        if kind not in KINDS:
            raise ValueError(f"unknown event kind {kind!r}")
        if self.events and tick < self.events[-1].tick:
            raise ValueError(f"event tick {tick} precedes last tick {self.events[-1].tick}")
        ev = Event(tick, node, kind, payload)
        self.events.append(ev)
        self._by_kind.setdefault(kind, []).append(ev)
        return ev

    def __iter__(self) -> Iterator[Event]:
        return iter(self.events)

    def __len__(self):
        return len(self.events)

    def of_kind(self, kind: str) -> list:
        return list(self._by_kind.get(kind, ()))

    def to_ndjson(self) -> str:
        lines = [json.dumps({"meta": self.meta}, sort_keys=True, separators=(",", ":"))]
        lines.extend(e.to_json() for e in self.events)
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        try:
            Path(path).write_text(self.to_ndjson(), encoding="utf-8")
        except OSError as exc:
            raise OutputError(f"cannot write event log to {path}: {exc}") from exc

    @classmethod
    def from_ndjson(cls, text: str) -> "EventLog":
        log = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"line {lineno}: {exc}") from exc
            if "meta" in obj:
                log.meta = obj["meta"]
                continue
            try:
                log.append(obj["tick"], obj["node"], obj["kind"], **obj["payload"])
            except (KeyError, TypeError, ValueError) as exc:
                raise InputError(f"line {lineno}: bad event record: {exc}") from exc
        return log

    @classmethod
    def read(cls, path) -> "EventLog":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise InputError(f"cannot read event log {path}: {exc}") from exc
        return cls.from_ndjson(text)


def last_tick(log: EventLog) -> Optional[int]:
    return log.events[-1].tick if log.events else None
