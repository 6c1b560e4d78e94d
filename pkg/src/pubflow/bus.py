"""In-process publish-subscribe bus.

The channel catalog is closed: nine channels carry the whole protocol.
Every publish gets a bus-global monotonically increasing sequence number,
so the event log is a total order of everything any actor said.  Delivery
is pull-based: subscribers call drain() and receive, in seq order, every
envelope published to their channels after they subscribed.  There is no
replay for late subscribers.

The log is line-oriented JSON, one object per envelope:
{"seq": ..., "ts": ..., "channel": ..., "kind": ..., "sender": ..., "payload": ...}
Identical runs produce byte-identical logs; nothing non-deterministic is
ever written.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import NamedTuple, Optional

from .errors import SchemaError, UnknownActor, UnknownChannel


class Channel(str, Enum):
    WAITING_TASKS = "WaitingTasks"
    TASKS_TO_DO = "TasksToDo"
    TASKS_IN_PROGRESS = "TasksInProgress"
    TASKS_TO_CHECK = "TasksToCheck"
    FINISHED_TASKS = "FinishedTasks"
    VOLUNTEER_WORKERS = "VolunteerWorkers"
    EMERGENCY = "Emergency"
    DLC = "DLC"
    EM = "EM"


CHANNEL_CATALOG = tuple(c.value for c in Channel)

# Required payload fields per message kind; publish refuses anything else.
KIND_FIELDS: dict[str, frozenset[str]] = {
    "task": frozenset({"task_id", "attempt", "spec"}),
    "assignment": frozenset({"task_id", "worker_id", "attempt"}),
    "volunteer": frozenset({"task_id", "worker_id", "attempt", "profile"}),
    "started": frozenset({"task_id", "worker_id", "attempt"}),
    "heartbeat": frozenset({"task_id", "worker_id", "attempt"}),
    "result": frozenset({"task_id", "worker_id", "attempt", "exit_status",
                         "outputs", "spec"}),
    "verdict": frozenset({"task_id", "attempt", "ok", "outputs"}),
    "emergency": frozenset({"reason", "batch_id"}),
    "dlc": frozenset({"task_id", "event"}),
    "em": frozenset({"logical_gpus", "physical_gpus", "scheduling_policy",
                     "performance_model_available"}),
}


@dataclass(frozen=True)
class Envelope:
    channel: str
    kind: str
    seq: int
    sender: str
    ts: int
    payload: dict


class Subscription(NamedTuple):
    actor: str
    channel: str


@dataclass
class EventLog:
    """Accumulates serialized envelopes; one JSON line each."""

    lines: list[str] = field(default_factory=list)

    def append(self, env: Envelope) -> None:
        record = {
            "seq": env.seq,
            "ts": env.ts,
            "channel": env.channel,
            "kind": env.kind,
            "sender": env.sender,
            "payload": env.payload,
        }
        self.lines.append(json.dumps(record, separators=(",", ":")))

    def dumps(self) -> str:
        return "".join(line + "\n" for line in self.lines)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")


def _normalize_channel(channel: str | Channel) -> str:
    value = channel.value if isinstance(channel, Channel) else channel
    if value not in CHANNEL_CATALOG:
        raise UnknownChannel(f"no channel {value!r} in the catalog")
    return value


class InProcessBus:
    """Single-process bus; the simulator advances `now` for timestamps."""

    def __init__(self) -> None:
        self.now: int = 0
        self._seq = 0
        self._queues: dict[str, deque[Envelope]] = {}
        self._subs: dict[str, list[str]] = {c: [] for c in CHANNEL_CATALOG}
        self.log = EventLog()

    # -- registry ---------------------------------------------------------

    def register(self, actor_id: str) -> None:
        if actor_id in self._queues:
            raise SchemaError(f"actor {actor_id!r} already registered")
        self._queues[actor_id] = deque()

    def subscribe(self, actor_id: str, channel: str | Channel) -> Subscription:
        if actor_id not in self._queues:
            raise UnknownActor(f"actor {actor_id!r} is not registered")
        value = _normalize_channel(channel)
        if actor_id not in self._subs[value]:
            self._subs[value].append(actor_id)
        return Subscription(actor_id, value)

    # -- traffic ----------------------------------------------------------

    def publish(self, sender: str, channel: str | Channel, kind: str,
                payload: dict) -> int:
        value = _normalize_channel(channel)
        required = KIND_FIELDS.get(kind)
        if required is None:
            raise SchemaError(f"unknown message kind {kind!r}")
        missing = required - payload.keys()
        if missing:
            raise SchemaError(
                f"payload for kind {kind!r} missing {sorted(missing)}")
        self._seq += 1
        env = Envelope(channel=value, kind=kind, seq=self._seq,
                       sender=sender, ts=self.now, payload=payload)
        self.log.append(env)  # also validates JSON-serializability
        for actor_id in self._subs[value]:
            self._queues[actor_id].append(env)
        return self._seq

    def drain(self, actor_id: str) -> list[Envelope]:
        if actor_id not in self._queues:
            raise UnknownActor(f"actor {actor_id!r} is not registered")
        queue = self._queues[actor_id]
        out = list(queue)
        queue.clear()
        return out

    # -- accounting -------------------------------------------------------

    @property
    def messages_total(self) -> int:
        return self._seq

    def messages_by_channel(self) -> dict[str, int]:
        counts = {c: 0 for c in CHANNEL_CATALOG}
        for line in self.log.lines:
            counts[json.loads(line)["channel"]] += 1
        return {c: n for c, n in counts.items() if n}
