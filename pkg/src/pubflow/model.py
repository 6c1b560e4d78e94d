"""Core value types: tasks, batches, unfold rules, worker profiles.

These are plain immutable dataclasses.  All graph and engine operations
treat them as values; mutation happens by building new instances
(see graph.unfold), never in place.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Optional

from .errors import StateError


class TaskState(Enum):
    """Lifecycle states, ordered.  Within one attempt the index never
    decreases; a new attempt resets the task to TODO."""

    WAITING = 0
    TODO = 1
    IN_PROGRESS = 2
    TO_CHECK = 3
    FINISHED = 4


def check_transition(current: TaskState, new: TaskState,
                     current_attempt: int, new_attempt: int) -> None:
    """Enforce the lifecycle rules; raises StateError on an illegal move.

    Forward moves keep the attempt.  The only backward move is a reset to
    TODO with the attempt incremented (re-publication after a timeout or a
    failed check), and a Finished task never moves again.
    """
    if current is TaskState.FINISHED:
        raise StateError(f"task already finished (attempt {current_attempt})")
    if new_attempt == current_attempt:
        if new.value < current.value:
            raise StateError(
                f"state cannot move backward within attempt "
                f"{current_attempt}: {current.name} -> {new.name}")
        return
    if new_attempt > current_attempt:
        if new is not TaskState.TODO:
            raise StateError(
                f"attempt bump must reset to TODO, got {new.name}")
        return
    raise StateError(
        f"attempt cannot decrease: {current_attempt} -> {new_attempt}")


@dataclass(frozen=True)
class KernelSpec:
    """A named executable action.

    name must be resolvable in the kernel registry when the task runs.
    inputs/outputs are dataset ids in the run workspace.  declared_duration
    is the nominal work in simulator ticks at speed 1.0.
    """

    name: str
    params: Mapping[str, object] = field(default_factory=dict)
    inputs: tuple[str, ...] = ()
    outputs: tuple[str, ...] = ()
    declared_duration: float = 1.0

    def __post_init__(self) -> None:
        if self.declared_duration <= 0:
            raise ValueError("declared_duration must be positive")


@dataclass(frozen=True)
class Task:
    id: str
    kernel: KernelSpec
    deps: frozenset[str] = frozenset()
    required_caps: frozenset[str] = frozenset()
    validator: Optional[str] = None
    max_attempts: int = 3
    unfold_rule: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("task id must be non-empty")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.id in self.deps:
            raise ValueError(f"task {self.id!r} depends on itself")


@dataclass(frozen=True)
class ResourceSnapshot:
    """What the engine knows about available resources at one instant.

    Guards are pure predicates over this; building it is the caller's job.
    """

    available_workers: int = 0
    capabilities: frozenset[str] = frozenset()
    dataset_sizes: Mapping[str, int] = field(default_factory=dict)


@dataclass(frozen=True)
class GuardPredicate:
    """Condition an unfold rule must satisfy before a node is expanded."""

    min_workers: int = 0
    required_cap: Optional[str] = None
    dataset_id: Optional[str] = None
    min_dataset_size: Optional[int] = None

    def evaluate(self, snapshot: ResourceSnapshot) -> bool:
        if snapshot.available_workers < self.min_workers:
            return False
        if self.required_cap is not None \
                and self.required_cap not in snapshot.capabilities:
            return False
        if self.min_dataset_size is not None:
            size = snapshot.dataset_sizes.get(self.dataset_id or "", 0)
            if size < self.min_dataset_size:
                return False
        return True


@dataclass(frozen=True)
class UnfoldRule:
    """Production rule replacing one node by a small sub-graph.

    head names the kernel the target task must run.  body tasks use local
    ids; entries/exits designate which body nodes inherit the parent's
    incoming and outgoing edges.
    """

    rule_id: str
    head: str
    body: tuple[Task, ...]
    entries: frozenset[str]
    exits: frozenset[str]
    guard: GuardPredicate = GuardPredicate()

    def __post_init__(self) -> None:
        ids = {t.id for t in self.body}
        if len(ids) != len(self.body):
            raise ValueError(f"rule {self.rule_id!r} body has duplicate ids")
        if not self.entries or not self.entries <= ids:
            raise ValueError(
                f"rule {self.rule_id!r} entries must be a non-empty subset "
                "of the body")
        if not self.exits or not self.exits <= ids:
            raise ValueError(
                f"rule {self.rule_id!r} exits must be a non-empty subset "
                "of the body")
        for t in self.body:
            if not t.deps <= ids:
                raise ValueError(
                    f"rule {self.rule_id!r} body task {t.id!r} depends on "
                    "ids outside the body")


@dataclass(frozen=True)
class WorkflowBatch:
    """A named set of tasks plus the unfold rules they may reference."""

    batch_id: str
    tasks: Mapping[str, Task]
    rules: Mapping[str, UnfoldRule] = field(default_factory=dict)
    metadata: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.batch_id:
            raise ValueError("batch_id must be non-empty")
        for tid, task in self.tasks.items():
            if tid != task.id:
                raise ValueError(f"task key {tid!r} != task id {task.id!r}")
            for dep in sorted(task.deps):
                if dep not in self.tasks:
                    raise ValueError(
                        f"task {tid!r} depends on unknown task {dep!r}")

    def edges(self) -> list[tuple[str, str]]:
        """Dependency edges as (dep, task) pairs, deterministic order."""
        out = []
        for tid in sorted(self.tasks):
            for dep in sorted(self.tasks[tid].deps):
                out.append((dep, tid))
        return out


@dataclass(frozen=True)
class WorkerProfile:
    """What a volunteer advertises about itself."""

    worker_id: str
    capabilities: frozenset[str] = frozenset()
    speed: float = 1.0
    reliability: float = 1.0
    alive: bool = True

    def __post_init__(self) -> None:
        if not self.worker_id:
            raise ValueError("worker_id must be non-empty")
        if self.speed <= 0:
            raise ValueError("speed must be positive")
        if not 0.0 <= self.reliability <= 1.0:
            raise ValueError("reliability must be in [0, 1]")

    def to_payload(self) -> dict:
        return {
            "capabilities": sorted(self.capabilities),
            "speed": self.speed,
            "reliability": self.reliability,
        }

    @classmethod
    def from_payload(cls, worker_id: str, payload: Mapping) -> "WorkerProfile":
        return cls(
            worker_id=worker_id,
            capabilities=frozenset(payload.get("capabilities", ())),
            speed=float(payload.get("speed", 1.0)),
            reliability=float(payload.get("reliability", 1.0)),
        )
