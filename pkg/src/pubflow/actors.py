"""The five protocol actors and the worker-selection policy.

Everything coordinates through bus messages; no actor touches another
actor's state.  One batch flows like this:

  broker       publishes every task on WaitingTasks, in id order
  coordinator  releases dependency-satisfied tasks to TasksToDo, collects
               volunteers, assigns the best-scoring one per task attempt,
               and declares the batch finished on Emergency
  workers      volunteer for open tasks they are capable of, execute
               assignments, heartbeat while running, and push results to
               TasksToCheck
  monitor      watches assigned tasks; when heartbeats go stale it
               re-publishes the task with the attempt bumped and emits a
               data-policy event on DLC
  checker      validates results and publishes verdicts on FinishedTasks,
               re-publishing failed tasks until their attempt budget runs
               out

Workers volunteer only while idle and re-volunteer for still-open tasks
whenever they become idle; the coordinator deduplicates volunteers per
(worker, task, attempt) and re-runs selection every step, so a freed
worker is reconsidered without any extra traffic.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from random import Random
from typing import Callable, Mapping, Optional, Sequence

from .bus import Channel, Envelope, InProcessBus
from .errors import GuardFailed, ValidationError
from .execution import EMConfig, Workspace, em_negotiate, execute_kernel
from .graph import ready_tasks, unfold, validate_structure
from .model import (
    ResourceSnapshot,
    Task,
    TaskState,
    WorkerProfile,
    WorkflowBatch,
)
from .workflow_io import task_from_obj, task_to_obj

log = logging.getLogger("pubflow.actors")


# ------------------------------------------------------------- selection

@dataclass(frozen=True)
class SlaPolicy:
    """Weights of the volunteer score; speed saturates at s_cap."""

    w_r: float = 0.7
    w_s: float = 0.3
    s_cap: float = 4.0


def sla_score(profile: WorkerProfile, policy: SlaPolicy = SlaPolicy()) -> float:
    return (policy.w_r * profile.reliability
            + policy.w_s * min(profile.speed, policy.s_cap) / policy.s_cap)


def select_worker(task: Task, volunteers: Sequence[WorkerProfile],
                  policy: SlaPolicy = SlaPolicy()) -> Optional[str]:
    """Best eligible volunteer, or None when nobody qualifies.

    Eligible means alive and advertising every required capability.
    Ties on the score go to the lexicographically smallest worker id.
    """
    eligible = [w for w in volunteers
                if w.alive and task.required_caps <= w.capabilities]
    if not eligible:
        return None
    best = min(eligible,
               key=lambda w: (-sla_score(w, policy), w.worker_id))
    return best.worker_id


@dataclass(frozen=True)
class EngineConfig:
    sla: SlaPolicy = SlaPolicy()
    heartbeat_period: int = 5    # H: ticks between heartbeats
    timeout_multiplier: int = 3  # k: stale after k * H silent ticks
    max_attempts_default: int = 3

    @classmethod
    def from_dict(cls, doc: Mapping) -> "EngineConfig":
        sla = doc.get("sla", {})
        hb = doc.get("heartbeat", {})
        return cls(
            sla=SlaPolicy(
                w_r=float(sla.get("w_r", 0.7)),
                w_s=float(sla.get("w_s", 0.3)),
                s_cap=float(sla.get("s_cap", 4.0)),
            ),
            heartbeat_period=int(hb.get("H", 5)),
            timeout_multiplier=int(hb.get("k", 3)),
            max_attempts_default=int(doc.get("max_attempts_default", 3)),
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "EngineConfig":
        return cls.from_dict(json.loads(Path(path).read_text("utf-8")))


def _task_payload(task: Task, attempt: int) -> dict:
    return {"task_id": task.id, "attempt": attempt, "spec": task_to_obj(task)}


# ---------------------------------------------------------------- broker

class Broker:
    """Submits one batch and then only listens for the shutdown signal."""

    def __init__(self, bus: InProcessBus, actor_id: str = "broker") -> None:
        self.bus = bus
        self.id = actor_id
        bus.register(actor_id)
        bus.subscribe(actor_id, Channel.EMERGENCY)
        self.halted = False
        self._pending: Optional[WorkflowBatch] = None

    def queue(self, batch: WorkflowBatch) -> None:
        self._pending = batch

    def submit(self, batch: WorkflowBatch) -> list[int]:
        """Publish every task on WaitingTasks, lexicographic id order.

        A cyclic batch is refused outright (ValidationError, nothing
        published).
        """
        report = validate_structure(batch)
        if not report.ok:
            raise ValidationError(
                "cyclic batch: " + " -> ".join(report.cycle or []))
        return [
            self.bus.publish(self.id, Channel.WAITING_TASKS, "task",
                             _task_payload(batch.tasks[tid], 1))
            for tid in sorted(batch.tasks)
        ]

    def step(self, now: int) -> None:
        if self.halted:
            return
        for env in self.bus.drain(self.id):
            if env.channel == Channel.EMERGENCY.value:
                self.halted = True
                return
        if self._pending is not None:
            batch, self._pending = self._pending, None
            self.submit(batch)


# ------------------------------------------------------------ coordinator

class Coordinator:
    """Owns task lifecycle state and worker selection for one batch."""

    def __init__(self, bus: InProcessBus, config: EngineConfig = EngineConfig(),
                 actor_id: str = "coordinator",
                 dataset_sizes: Optional[Callable[[], dict[str, int]]] = None,
                 abort_on_failure: bool = True) -> None:
        self.bus = bus
        self.id = actor_id
        self.config = config
        self.dataset_sizes = dataset_sizes
        self.abort_on_failure = abort_on_failure
        bus.register(actor_id)
        for channel in (Channel.WAITING_TASKS, Channel.TASKS_TO_DO,
                        Channel.VOLUNTEER_WORKERS, Channel.FINISHED_TASKS,
                        Channel.EM):
            bus.subscribe(actor_id, channel)
        self.batch: Optional[WorkflowBatch] = None
        self.status: dict[str, tuple[TaskState, int]] = {}
        self.volunteers: dict[str, list[str]] = {}
        self.profiles: dict[str, WorkerProfile] = {}
        self.assignments: dict[str, str] = {}   # task -> worker
        self.busy: dict[str, str] = {}          # worker -> task
        self.released: set[str] = set()
        self.finished: set[str] = set()
        self.failed: set[str] = set()
        self.seen_waiting: set[str] = set()
        self.unfold_done: set[str] = set()
        self.em_configs: dict[str, dict] = {}
        self.emergency_seq: Optional[int] = None
        self.halted = False

    # -- snapshots ---------------------------------------------------------

    def _snapshot(self) -> ResourceSnapshot:
        caps: set[str] = set()
        for wid in sorted(self.profiles):
            caps |= self.profiles[wid].capabilities
        sizes = self.dataset_sizes() if self.dataset_sizes else {}
        return ResourceSnapshot(
            available_workers=len(self.profiles),
            capabilities=frozenset(caps),
            dataset_sizes=sizes,
        )

    # -- event handling ----------------------------------------------------

    def step(self, now: int) -> None:
        if self.halted:
            return
        for env in self.bus.drain(self.id):
            if env.channel == Channel.EMERGENCY.value:
                self.halted = True
                return
            if env.channel == Channel.WAITING_TASKS.value and env.kind == "task":
                self._on_waiting(env)
            elif env.channel == Channel.TASKS_TO_DO.value and env.kind == "task" \
                    and env.sender != self.id:
                self._on_republished(env)
            elif env.channel == Channel.VOLUNTEER_WORKERS.value \
                    and env.kind == "volunteer":
                self._on_volunteer(env)
            elif env.channel == Channel.FINISHED_TASKS.value \
                    and env.kind == "verdict":
                self._on_verdict(env)
            elif env.channel == Channel.EM.value and env.kind == "em":
                wid = env.payload.get("worker_id", env.sender)
                self.em_configs[wid] = dict(env.payload)
        if self.halted:
            return
        self._sweep_assignments()
        self._check_complete()

    def _on_waiting(self, env: Envelope) -> None:
        tid = env.payload["task_id"]
        if self.batch is None:
            log.warning("coordinator has no batch; dropping task %s", tid)
            return
        if tid in self.seen_waiting:
            log.info("duplicate task publication %s ignored", tid)
            return
        if tid not in self.batch.tasks:
            log.warning("unknown task %s on WaitingTasks", tid)
            return
        self.seen_waiting.add(tid)
        self.status[tid] = (TaskState.WAITING, 1)
        if self.batch.tasks[tid].deps <= self.finished:
            self._release(tid)

    def adopt(self, batch: WorkflowBatch) -> None:
        """Tell the coordinator which batch the broker is about to submit."""
        self.batch = batch

    def _release(self, tid: str) -> None:
        """First publication of a task: unfold it if its rule says so."""
        assert self.batch is not None
        task = self.batch.tasks[tid]
        rule_id = task.unfold_rule
        if rule_id and rule_id in self.batch.rules \
                and tid not in self.unfold_done:
            self.unfold_done.add(tid)
            state = self.status.get(tid, (TaskState.WAITING, 1))[0]
            try:
                unfolded = unfold(self.batch, tid,
                                  self.batch.rules[rule_id],
                                  self._snapshot(), state=state)
            except GuardFailed as exc:
                log.info("unfold skipped: %s", exc)
            except Exception as exc:
                log.warning("unfold of %s failed (%s); running as-is",
                            tid, exc)
            else:
                self.batch = unfolded
                self.status.pop(tid, None)
                spliced = sorted(
                    t for t in unfolded.tasks if t.startswith(tid + "/"))
                for nid in spliced:
                    self.status[nid] = (TaskState.WAITING, 1)
                for nid in spliced:
                    if unfolded.tasks[nid].deps <= self.finished:
                        self._publish_todo(nid, 1)
                return
        self._publish_todo(tid, self.status.get(tid, (None, 1))[1])

    def _publish_todo(self, tid: str, attempt: int) -> None:
        assert self.batch is not None
        self.status[tid] = (TaskState.TODO, attempt)
        self.released.add(tid)
        self.volunteers.setdefault(tid, [])
        self.bus.publish(self.id, Channel.TASKS_TO_DO, "task",
                         _task_payload(self.batch.tasks[tid], attempt))

    def _on_republished(self, env: Envelope) -> None:
        """Monitor or checker pushed a task back to ToDo with attempt+1."""
        tid = env.payload["task_id"]
        attempt = env.payload["attempt"]
        current = self.status.get(tid)
        if current is None:
            log.warning("re-publication of unknown task %s ignored", tid)
            return
        state, cur_attempt = current
        if state is TaskState.FINISHED:
            log.info("re-publication of finished task %s ignored", tid)
            return
        if attempt <= cur_attempt:
            log.info("stale re-publication of %s (attempt %d <= %d) ignored",
                     tid, attempt, cur_attempt)
            return
        self.status[tid] = (TaskState.TODO, attempt)
        self.volunteers[tid] = []
        worker = self.assignments.pop(tid, None)
        if worker is not None:
            self.busy.pop(worker, None)

    def _on_volunteer(self, env: Envelope) -> None:
        tid = env.payload["task_id"]
        wid = env.payload["worker_id"]
        attempt = env.payload["attempt"]
        profile = WorkerProfile.from_payload(wid, env.payload["profile"])
        self.profiles[wid] = profile
        current = self.status.get(tid)
        if current is None:
            log.info("volunteer %s for unknown task %s ignored", wid, tid)
            return
        state, cur_attempt = current
        if state is not TaskState.TODO or attempt != cur_attempt:
            log.info("stale volunteer %s for %s (state %s, attempt %d)",
                     wid, tid, state.name, attempt)
            return
        queue = self.volunteers.setdefault(tid, [])
        if wid not in queue:  # once per worker per task per attempt
            queue.append(wid)

    def _on_verdict(self, env: Envelope) -> None:
        tid = env.payload["task_id"]
        if env.payload["ok"]:
            if tid in self.finished:
                return
            self.finished.add(tid)
            self.status[tid] = (TaskState.FINISHED,
                                self.status.get(tid, (None, 1))[1])
            worker = self.assignments.pop(tid, None)
            if worker is not None:
                self.busy.pop(worker, None)
            self.volunteers.pop(tid, None)
            if self.batch is not None and tid in self.batch.tasks:
                for nid in ready_tasks(self.batch, self.finished,
                                       self.released):
                    self._release(nid)
            return
        log.warning("task %s failed permanently", tid)
        self.failed.add(tid)
        if self.abort_on_failure and self.emergency_seq is None:
            assert self.batch is not None
            self.emergency_seq = self.bus.publish(
                self.id, Channel.EMERGENCY, "emergency",
                {"reason": "failed", "batch_id": self.batch.batch_id})
            self.halted = True

    # -- per-step passes ----------------------------------------------------

    def _sweep_assignments(self) -> None:
        """Try to assign every unassigned ToDo task; one envelope per
        (task, attempt), first verified winner keeps the slot."""
        for tid in sorted(self.status):
            state, attempt = self.status[tid]
            if state is not TaskState.TODO or tid in self.assignments:
                continue
            assert self.batch is not None
            task = self.batch.tasks[tid]
            candidates = [self.profiles[w]
                          for w in self.volunteers.get(tid, ())
                          if w not in self.busy]
            winner = select_worker(task, candidates, self.config.sla)
            if winner is None:
                continue
            self.status[tid] = (TaskState.IN_PROGRESS, attempt)
            self.assignments[tid] = winner
            self.busy[winner] = tid
            self.bus.publish(self.id, Channel.TASKS_TO_DO, "assignment",
                             {"task_id": tid, "worker_id": winner,
                              "attempt": attempt})

    def _check_complete(self) -> None:
        if self.batch is None or self.emergency_seq is not None:
            return
        if not self.batch.tasks:
            return
        if self.finished >= set(self.batch.tasks):
            self.emergency_seq = self.bus.publish(
                self.id, Channel.EMERGENCY, "emergency",
                {"reason": "complete", "batch_id": self.batch.batch_id})
            self.halted = True


# ---------------------------------------------------------------- worker

@dataclass
class _Job:
    task_id: str
    attempt: int
    spec: dict
    started: int
    remaining: float


class WorkerActor:
    """A volunteer node: sees tasks, offers itself, runs what it wins."""

    def __init__(self, bus: InProcessBus, profile: WorkerProfile,
                 workspace: Workspace,
                 heartbeat_period: int = 5,
                 volunteer_latency: int = 0,
                 volunteer_jitter: int = 0,
                 rng: Optional[Random] = None,
                 em_probe: Optional[EMConfig] = None) -> None:
        self.bus = bus
        self.profile = profile
        self.id = profile.worker_id
        self.workspace = workspace
        self.heartbeat_period = heartbeat_period
        self.volunteer_latency = volunteer_latency
        self.volunteer_jitter = volunteer_jitter
        self.rng = rng or Random(0)
        self.em_probe = em_probe
        self.em = EMConfig()
        bus.register(self.id)
        bus.subscribe(self.id, Channel.TASKS_TO_DO)
        bus.subscribe(self.id, Channel.EMERGENCY)
        self.alive = True
        self.halted = False
        self.open: dict[str, tuple[int, dict]] = {}
        self.pending: dict[str, int] = {}
        self.running: Optional[_Job] = None
        self.executed_ticks = 0
        self._announced_em = False

    def _due(self, now: int) -> int:
        jitter = self.rng.randint(0, self.volunteer_jitter) \
            if self.volunteer_jitter > 0 else 0
        return now + self.volunteer_latency + jitter

    def step(self, now: int) -> None:
        if self.halted or not self.alive:
            return
        if self.em_probe is not None and not self._announced_em:
            self._announced_em = True
            self.em = em_negotiate(self.em_probe)
            payload = self.em.to_payload()
            payload["worker_id"] = self.id
            self.bus.publish(self.id, Channel.EM, "em", payload)
        for env in self.bus.drain(self.id):
            if env.channel == Channel.EMERGENCY.value:
                self.halted = True
                return
            if env.kind == "task":
                self._on_task(env, now)
            elif env.kind == "assignment":
                self._on_assignment(env, now)
        if self.running is not None and self.running.started < now:
            self._advance(now)
        if self.running is None:
            self._flush_volunteers(now)

    def _on_task(self, env: Envelope, now: int) -> None:
        tid = env.payload["task_id"]
        caps = frozenset(env.payload["spec"].get("required_caps", ()))
        if not caps <= self.profile.capabilities:
            return
        self.open[tid] = (env.payload["attempt"], env.payload["spec"])
        if self.running is None and tid not in self.pending:
            self.pending[tid] = self._due(now)

    def _on_assignment(self, env: Envelope, now: int) -> None:
        tid = env.payload["task_id"]
        self.pending.pop(tid, None)
        entry = self.open.pop(tid, None)
        if env.payload["worker_id"] != self.id:
            return
        if self.running is not None:
            log.warning("%s assigned %s while busy; ignoring", self.id, tid)
            return
        if entry is None or entry[0] != env.payload["attempt"]:
            log.warning("%s assigned %s attempt %d without its spec",
                        self.id, tid, env.payload["attempt"])
            return
        attempt, spec = entry
        self.running = _Job(
            task_id=tid, attempt=attempt, spec=spec, started=now,
            remaining=float(spec["kernel"].get("duration", 1.0)))
        self.bus.publish(self.id, Channel.TASKS_IN_PROGRESS, "started",
                         {"task_id": tid, "worker_id": self.id,
                          "attempt": attempt})

    def _advance(self, now: int) -> None:
        job = self.running
        assert job is not None
        job.remaining -= self.profile.speed
        self.executed_ticks += 1
        if job.remaining <= 1e-9:
            self._complete(now)
        elif (now - job.started) % self.heartbeat_period == 0:
            self.bus.publish(self.id, Channel.TASKS_IN_PROGRESS, "heartbeat",
                             {"task_id": job.task_id, "worker_id": self.id,
                              "attempt": job.attempt})

    def _complete(self, now: int) -> None:
        job = self.running
        assert job is not None
        self.running = None
        task = task_from_obj(job.spec)
        payload = {
            "task_id": job.task_id,
            "worker_id": self.id,
            "attempt": job.attempt,
            "spec": job.spec,
        }
        try:
            result = execute_kernel(task.kernel, self.workspace, self.em,
                                    speed=self.profile.speed)
        except Exception as exc:  # MissingInput: ask the data policy for help
            self.bus.publish(self.id, Channel.DLC, "dlc",
                             {"task_id": job.task_id,
                              "event": "transmission_failure"})
            payload.update(exit_status=2, outputs={},
                           elapsed=float(now - job.started),
                           error=f"{type(exc).__name__}: {exc}")
        else:
            payload.update(exit_status=result.exit_status,
                           outputs=result.outputs, elapsed=result.elapsed)
            if result.error is not None:
                payload["error"] = result.error
        self.bus.publish(self.id, Channel.TASKS_TO_CHECK, "result", payload)
        for tid in sorted(self.open):
            if tid not in self.pending:
                self.pending[tid] = self._due(now)

    def _flush_volunteers(self, now: int) -> None:
        for tid in sorted(self.pending):
            if self.pending[tid] > now:
                continue
            del self.pending[tid]
            entry = self.open.get(tid)
            if entry is None:
                continue
            attempt, _spec = entry
            self.bus.publish(self.id, Channel.VOLUNTEER_WORKERS, "volunteer",
                             {"task_id": tid, "worker_id": self.id,
                              "attempt": attempt,
                              "profile": self.profile.to_payload()})


# ---------------------------------------------------------------- monitor

@dataclass
class _Watch:
    worker_id: str
    attempt: int
    last_seen: int


class Monitor:
    """Re-publishes tasks whose executor went silent.

    The watch starts at the assignment (so a worker that dies before its
    first message is still covered) and is refreshed by started and
    heartbeat envelopes.  A watch whose task went k*H ticks without news
    triggers a re-publication with the attempt bumped, plus a
    transmission-failure event for the data policy.
    """

    def __init__(self, bus: InProcessBus, heartbeat_period: int = 5,
                 timeout_multiplier: int = 3,
                 actor_id: str = "monitor") -> None:
        self.bus = bus
        self.id = actor_id
        self.heartbeat_period = heartbeat_period
        self.timeout_multiplier = timeout_multiplier
        bus.register(actor_id)
        for channel in (Channel.TASKS_TO_DO, Channel.TASKS_IN_PROGRESS,
                        Channel.TASKS_TO_CHECK, Channel.EMERGENCY):
            bus.subscribe(actor_id, channel)
        self.specs: dict[str, tuple[int, dict]] = {}
        self.watch: dict[str, _Watch] = {}
        self.timeouts = 0
        self.halted = False

    def step(self, now: int) -> None:
        if self.halted:
            return
        for env in self.bus.drain(self.id):
            if env.channel == Channel.EMERGENCY.value:
                self.halted = True
                return
            kind = env.kind
            payload = env.payload
            tid = payload.get("task_id")
            if kind == "task":
                known = self.specs.get(tid)
                if known is None or payload["attempt"] >= known[0]:
                    self.specs[tid] = (payload["attempt"], payload["spec"])
            elif kind == "assignment":
                spec = self.specs.get(tid)
                if spec is None:
                    log.warning("assignment for unknown task %s", tid)
                    continue
                self.watch[tid] = _Watch(payload["worker_id"],
                                         payload["attempt"], env.ts)
            elif kind in ("started", "heartbeat"):
                watch = self.watch.get(tid)
                if watch is not None and watch.attempt == payload["attempt"]:
                    watch.last_seen = env.ts
            elif kind == "result":
                watch = self.watch.get(tid)
                if watch is not None and watch.attempt == payload["attempt"]:
                    del self.watch[tid]
        deadline = self.timeout_multiplier * self.heartbeat_period
        for tid in sorted(self.watch):
            watch = self.watch[tid]
            if now - watch.last_seen <= deadline:
                continue
            attempt, spec = self.specs[tid]
            next_attempt = max(attempt, watch.attempt) + 1
            log.info("task %s stale (worker %s, %d ticks); re-publishing "
                     "as attempt %d", tid, watch.worker_id,
                     now - watch.last_seen, next_attempt)
            self.bus.publish(self.id, Channel.TASKS_TO_DO, "task",
                             {"task_id": tid, "attempt": next_attempt,
                              "spec": spec})
            self.bus.publish(self.id, Channel.DLC, "dlc",
                             {"task_id": tid,
                              "event": "transmission_failure"})
            del self.watch[tid]
            self.timeouts += 1


# ---------------------------------------------------------------- checker

ValidatorFn = Callable[[Mapping, Mapping, Optional[Workspace]], bool]


def default_validator(spec: Mapping, result: Mapping,
                      workspace: Optional[Workspace]) -> bool:
    """Exit status zero, every declared output present, checksums match."""
    if result.get("exit_status") != 0:
        return False
    outputs = result.get("outputs", {})
    for dataset_id in spec["kernel"].get("outputs", ()):
        if dataset_id not in outputs:
            return False
        if workspace is not None:
            if not workspace.has_ready(dataset_id):
                return False
            if workspace.checksum(dataset_id) != outputs[dataset_id]:
                return False
    expected = spec["kernel"].get("params", {}).get("expected_checksums")
    if isinstance(expected, dict):
        for dataset_id in sorted(expected):
            if outputs.get(dataset_id) != expected[dataset_id]:
                return False
    return True


class Checker:
    """Validates results; first verified result per task wins."""

    def __init__(self, bus: InProcessBus,
                 workspace: Optional[Workspace] = None,
                 validators: Optional[dict[str, ValidatorFn]] = None,
                 max_attempts_default: int = 3,
                 actor_id: str = "checker") -> None:
        self.bus = bus
        self.id = actor_id
        self.workspace = workspace
        self.registry: dict[str, ValidatorFn] = {"default": default_validator}
        if validators:
            self.registry.update(validators)
        self.max_attempts_default = max_attempts_default
        bus.register(actor_id)
        bus.subscribe(actor_id, Channel.TASKS_TO_CHECK)
        bus.subscribe(actor_id, Channel.EMERGENCY)
        self.finished: set[str] = set()
        self.fails: dict[str, int] = {}
        self.duplicates = 0
        self.halted = False

    def step(self, now: int) -> None:
        if self.halted:
            return
        for env in self.bus.drain(self.id):
            if env.channel == Channel.EMERGENCY.value:
                self.halted = True
                return
            if env.kind != "result":
                continue
            self._on_result(env)

    def _on_result(self, env: Envelope) -> None:
        payload = env.payload
        tid = payload["task_id"]
        if tid in self.finished:
            self.duplicates += 1
            log.info("duplicate result for finished task %s discarded", tid)
            return
        spec = payload["spec"]
        name = spec.get("validator") or "default"
        fn = self.registry.get(name)
        if fn is None:
            log.warning("task %s names unknown validator %s", tid, name)
            ok = False
        else:
            try:
                ok = bool(fn(spec, payload, self.workspace))
            except Exception as exc:
                log.warning("validator %s raised %s; treating as failure",
                            name, exc)
                ok = False
        if ok:
            self.finished.add(tid)
            self.bus.publish(self.id, Channel.FINISHED_TASKS, "verdict",
                             {"task_id": tid, "attempt": payload["attempt"],
                              "ok": True, "outputs": payload["outputs"]})
            return
        self.fails[tid] = self.fails.get(tid, 0) + 1
        budget = int(spec.get("max_attempts") or self.max_attempts_default)
        if self.fails[tid] < budget:
            self.bus.publish(self.id, Channel.TASKS_TO_DO, "task",
                             {"task_id": tid,
                              "attempt": payload["attempt"] + 1,
                              "spec": spec})
        else:
            self.bus.publish(self.id, Channel.FINISHED_TASKS, "verdict",
                             {"task_id": tid, "attempt": payload["attempt"],
                              "ok": False, "outputs": {}})
