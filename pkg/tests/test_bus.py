"""Message bus semantics: numbering, fan-out, no replay, log format."""

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pubflow import (
    CHANNEL_CATALOG,
    Channel,
    InProcessBus,
    SchemaError,
    UnknownActor,
    UnknownChannel,
)


def fresh():
    bus = InProcessBus()
    bus.register("a")
    bus.register("b")
    return bus


def task_payload(tid="t1", attempt=1):
    return {"task_id": tid, "attempt": attempt,
            "spec": {"id": tid, "kernel": {"name": "noop"}}}


class TestCatalog:
    def test_exactly_nine_channels(self):
        assert len(CHANNEL_CATALOG) == 9
        assert CHANNEL_CATALOG == (
            "WaitingTasks", "TasksToDo", "TasksInProgress", "TasksToCheck",
            "FinishedTasks", "VolunteerWorkers", "Emergency", "DLC", "EM")

    def test_unknown_channel_rejected(self):
        bus = fresh()
        with pytest.raises(UnknownChannel):
            bus.subscribe("a", "SideChannel")
        with pytest.raises(UnknownChannel):
            bus.publish("a", "SideChannel", "task", task_payload())


class TestRegistration:
    def test_duplicate_actor_rejected(self):
        bus = fresh()
        with pytest.raises(SchemaError):
            bus.register("a")

    def test_unknown_subscriber_rejected(self):
        bus = fresh()
        with pytest.raises(UnknownActor):
            bus.subscribe("ghost", Channel.TASKS_TO_DO)

    def test_unknown_drain_rejected(self):
        bus = fresh()
        with pytest.raises(UnknownActor):
            bus.drain("ghost")


class TestDelivery:
    def test_seq_starts_at_one_and_is_global(self):
        bus = fresh()
        s1 = bus.publish("a", Channel.WAITING_TASKS, "task", task_payload())
        s2 = bus.publish("a", Channel.TASKS_TO_DO, "task", task_payload())
        s3 = bus.publish("b", Channel.DLC, "dlc",
                         {"task_id": "t1", "event": "transmission_failure"})
        assert (s1, s2, s3) == (1, 2, 3)

    def test_fan_out_to_all_subscribers(self):
        bus = fresh()
        bus.subscribe("a", Channel.TASKS_TO_DO)
        bus.subscribe("b", Channel.TASKS_TO_DO)
        bus.publish("a", Channel.TASKS_TO_DO, "task", task_payload())
        got_a = bus.drain("a")
        got_b = bus.drain("b")
        assert len(got_a) == len(got_b) == 1
        assert got_a[0].seq == got_b[0].seq == 1

    def test_publisher_receives_its_own_messages_when_subscribed(self):
        bus = fresh()
        bus.subscribe("a", Channel.TASKS_TO_DO)
        bus.publish("a", Channel.TASKS_TO_DO, "task", task_payload())
        assert len(bus.drain("a")) == 1

    def test_drain_clears_queue(self):
        bus = fresh()
        bus.subscribe("a", Channel.TASKS_TO_DO)
        bus.publish("b", Channel.TASKS_TO_DO, "task", task_payload())
        assert len(bus.drain("a")) == 1
        assert bus.drain("a") == []

    def test_no_replay_for_late_subscribers(self):
        bus = fresh()
        bus.publish("a", Channel.TASKS_TO_DO, "task", task_payload())
        bus.subscribe("b", Channel.TASKS_TO_DO)
        assert bus.drain("b") == []

    def test_fifo_order_within_subscriber(self):
        bus = fresh()
        bus.subscribe("b", Channel.TASKS_TO_DO)
        bus.subscribe("b", Channel.WAITING_TASKS)
        bus.publish("a", Channel.TASKS_TO_DO, "task", task_payload("t1"))
        bus.publish("a", Channel.WAITING_TASKS, "task", task_payload("t2"))
        bus.publish("a", Channel.TASKS_TO_DO, "task", task_payload("t3"))
        seqs = [env.seq for env in bus.drain("b")]
        assert seqs == [1, 2, 3]

    def test_unsubscribed_channel_not_delivered(self):
        bus = fresh()
        bus.subscribe("a", Channel.TASKS_TO_DO)
        bus.publish("b", Channel.WAITING_TASKS, "task", task_payload())
        assert bus.drain("a") == []


class TestPayloadSchemas:
    def test_unknown_kind_rejected(self):
        bus = fresh()
        with pytest.raises(SchemaError):
            bus.publish("a", Channel.TASKS_TO_DO, "gossip", {"x": 1})

    def test_missing_required_field_rejected(self):
        bus = fresh()
        with pytest.raises(SchemaError) as err:
            bus.publish("a", Channel.TASKS_TO_DO, "task",
                        {"task_id": "t1"})  # no attempt, no spec
        assert "attempt" in str(err.value)

    def test_every_kind_has_a_field_contract(self):
        bus = fresh()
        cases = {
            "task": (Channel.TASKS_TO_DO, task_payload()),
            "assignment": (Channel.TASKS_TO_DO,
                           {"task_id": "t", "worker_id": "w",
                            "attempt": 1}),
            "volunteer": (Channel.VOLUNTEER_WORKERS,
                          {"task_id": "t", "worker_id": "w", "attempt": 1,
                           "profile": {}}),
            "started": (Channel.TASKS_IN_PROGRESS,
                        {"task_id": "t", "worker_id": "w", "attempt": 1}),
            "heartbeat": (Channel.TASKS_IN_PROGRESS,
                          {"task_id": "t", "worker_id": "w",
                           "attempt": 1}),
            "result": (Channel.TASKS_TO_CHECK,
                       {"task_id": "t", "worker_id": "w", "attempt": 1,
                        "exit_status": 0, "outputs": {}, "spec": {}}),
            "verdict": (Channel.FINISHED_TASKS,
                        {"task_id": "t", "attempt": 1, "ok": True,
                         "outputs": {}}),
            "emergency": (Channel.EMERGENCY,
                          {"reason": "complete", "batch_id": "b"}),
            "dlc": (Channel.DLC,
                    {"task_id": "t", "event": "transmission_failure"}),
            "em": (Channel.EM,
                   {"logical_gpus": 1, "physical_gpus": 1,
                    "scheduling_policy": "in_memory",
                    "performance_model_available": False}),
        }
        for kind, (channel, payload) in cases.items():
            bus.publish("a", channel, kind, payload)
        assert bus.messages_total == len(cases)


class TestEventLog:
    def test_jsonl_key_order_and_separators(self):
        bus = fresh()
        bus.now = 4
        bus.publish("a", Channel.TASKS_TO_DO, "task", task_payload())
        line = bus.log.dumps().splitlines()[0]
        assert line.startswith('{"seq":1,"ts":4,"channel":"TasksToDo",'
                               '"kind":"task","sender":"a",')
        assert ", " not in line and ": " not in line
        assert json.loads(line)["payload"]["task_id"] == "t1"

    def test_log_records_every_publish(self):
        bus = fresh()
        for i in range(5):
            bus.publish("a", Channel.WAITING_TASKS, "task",
                        task_payload(f"t{i}"))
        assert bus.messages_total == 5
        assert len(bus.log.dumps().splitlines()) == 5

    def test_messages_by_channel(self):
        bus = fresh()
        bus.publish("a", Channel.WAITING_TASKS, "task", task_payload())
        bus.publish("a", Channel.TASKS_TO_DO, "task", task_payload())
        bus.publish("a", Channel.TASKS_TO_DO, "task", task_payload())
        counts = bus.messages_by_channel()
        assert counts["WaitingTasks"] == 1
        assert counts["TasksToDo"] == 2

    def test_write_trailing_newline(self, tmp_path):
        bus = fresh()
        bus.publish("a", Channel.WAITING_TASKS, "task", task_payload())
        path = tmp_path / "events.jsonl"
        bus.log.write(path)
        assert path.read_text("utf-8").endswith("\n")


@given(st.lists(st.sampled_from(CHANNEL_CATALOG), min_size=1, max_size=30))
@settings(max_examples=50, deadline=None)
def test_seq_always_dense_and_ordered(channels):
    bus = InProcessBus()
    bus.register("w")
    for channel in CHANNEL_CATALOG:
        bus.subscribe("w", channel)
    for channel in channels:
        bus.publish("x", channel, "emergency",
                    {"reason": "complete", "batch_id": "b"})
    seqs = [env.seq for env in bus.drain("w")]
    assert seqs == list(range(1, len(channels) + 1))
    records = [json.loads(line) for line in bus.log.dumps().splitlines()]
    assert [r["seq"] for r in records] == seqs
