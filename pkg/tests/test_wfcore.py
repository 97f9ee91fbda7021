"""Runtime contract: registration, the task wrapper's ordering, deferred
sends, error freeze, critical-stage locking, joins and cleanup."""

import threading

import pytest

from helpers import pump
from surgeflow.statestore import IncidentStatus, MessageStatus
from surgeflow.wfcore import (
    CLEANUP_QUEUE,
    DuplicateWorkflow,
    InvalidDefinition,
    JoinProtocolError,
    JoinSpec,
    StageRegistration,
    UnknownTargetQueue,
    UnknownWorkflow,
    WorkflowDefinition,
    WorkflowRuntime,
)


def two_stage(kind="flow", record=None):
    """A -> B pipeline; B appends its payload to `record`."""
    def stage_a(ctx):
        ctx.send_message("stage_b", {"from": "a", **ctx.message})

    def stage_b(ctx):
        if record is not None:
            record.append(ctx.message)

    return WorkflowDefinition(kind=kind, init_queue="stage_a", stages=[
        StageRegistration("stage_a", stage_a),
        StageRegistration("stage_b", stage_b),
    ])


class TestRegistration:
    def test_register_declares_queues(self, runtime, broker):
        runtime.register_workflow(two_stage())
        assert {"stage_a", "stage_b"} <= set(broker.queue_names())

    def test_reregister_same_kind_rejected(self, runtime):
        runtime.register_workflow(two_stage())
        with pytest.raises(DuplicateWorkflow):
            runtime.register_workflow(two_stage())

    def test_duplicate_queue_within_definition(self, runtime):
        defn = WorkflowDefinition(kind="dup", init_queue="q", stages=[
            StageRegistration("q", lambda ctx: None),
            StageRegistration("q", lambda ctx: None),
        ])
        with pytest.raises(InvalidDefinition):
            runtime.register_workflow(defn)

    def test_missing_init_queue(self, runtime):
        defn = WorkflowDefinition(kind="x", init_queue="nope", stages=[
            StageRegistration("q", lambda ctx: None),
        ])
        with pytest.raises(InvalidDefinition):
            runtime.register_workflow(defn)

    def test_queue_clash_across_workflows(self, runtime):
        runtime.register_workflow(two_stage("one"))
        with pytest.raises(InvalidDefinition):
            runtime.register_workflow(two_stage("two"))

    def test_critical_flag_propagates(self, runtime):
        defn = WorkflowDefinition(kind="c", init_queue="q", stages=[
            StageRegistration("q", lambda ctx: None, critical=True),
        ])
        runtime.register_workflow(defn)
        assert runtime.stage_registration("q").critical is True

    def test_cleanup_queue_reserved(self, runtime):
        defn = WorkflowDefinition(kind="c", init_queue=CLEANUP_QUEUE, stages=[
            StageRegistration(CLEANUP_QUEUE, lambda ctx: None),
        ])
        with pytest.raises(InvalidDefinition):
            runtime.register_workflow(defn)


class TestStartIncident:
    def test_start_publishes_initial_message(self, runtime, broker, store):
        runtime.register_workflow(two_stage())
        incident = runtime.start_incident("flow", "demo", {"n": 1})
        record = store.get_incident(incident)
        assert record.status is IncidentStatus.ACTIVE
        assert record.outstanding_messages == 1
        pending = broker.pending_messages("stage_a")
        assert len(pending) == 1 and pending[0].incident_id == incident
        entry = store.get_message(pending[0].message_id)
        assert entry.status is MessageStatus.SENT
        assert entry.parent_message_id is None

    def test_unknown_kind(self, runtime):
        with pytest.raises(UnknownWorkflow):
            runtime.start_incident("ghost", "x", {})

    def test_on_init_hook_runs_before_initial_message(self, runtime, broker):
        calls = []

        def hook(rt, incident_id, payload):
            calls.append((incident_id, payload, broker.queue_depth("solo")))

        defn = WorkflowDefinition(kind="hooked", init_queue="solo", on_init=hook,
                                  stages=[StageRegistration("solo", lambda ctx: None)])
        runtime.register_workflow(defn)
        incident = runtime.start_incident("hooked", "x", {"seed": 1})
        assert calls == [(incident, {"seed": 1}, 0)]

    def test_incidents_progress_independently(self, runtime, broker, store):
        seen = []
        runtime.register_workflow(two_stage(record=seen))
        a = runtime.start_incident("flow", "a", {"who": "a"})
        b = runtime.start_incident("flow", "b", {"who": "b"})
        pump(runtime, broker)
        assert sorted(m["who"] for m in seen) == ["a", "b"]
        for incident in (a, b):
            assert store.outstanding(incident) == 0


class TestExecuteDelivery:
    def test_outbox_deferred_until_clean_exit(self, runtime, broker, store):
        depths = []

        def sender(ctx):
            ctx.send_message("sink", {"n": 1})
            ctx.send_message("sink", {"n": 2})
            depths.append(broker.queue_depth("sink"))

        defn = WorkflowDefinition(kind="defer", init_queue="src", stages=[
            StageRegistration("src", sender),
            StageRegistration("sink", lambda ctx: None),
        ])
        runtime.register_workflow(defn)
        incident = runtime.start_incident("defer", "x", {})
        tag, message = broker.fetch("t", runtime.all_queues())
        runtime.execute_delivery(tag, message)
        assert depths == [0]  # nothing visible while the handler ran
        pending = broker.pending_messages("sink")
        assert [m.payload["n"] for m in pending] == [1, 2]
        assert all(m.parent_message_id == message.message_id for m in pending)
        assert store.get_message(message.message_id).status is MessageStatus.COMPLETED
        assert store.outstanding(incident) == 2

    def test_handler_error_freezes_incident_and_drops_siblings(self, runtime, broker, store):
        def boom(ctx):
            raise RuntimeError("deliberate")

        defn = WorkflowDefinition(kind="err", init_queue="boom", stages=[
            StageRegistration("boom", boom),
        ])
        runtime.register_workflow(defn)
        incident = runtime.start_incident("err", "x", {})
        siblings = [runtime.inject_external(incident, "boom", {"n": i}) for i in range(3)]
        pump(runtime, broker)
        assert store.get_incident(incident).status is IncidentStatus.ERROR
        first = broker.pending_messages("boom")  # drained
        assert first == []
        for mid in siblings:
            assert store.get_message(mid).status is MessageStatus.DROPPED
        assert store.outstanding(incident) == 0

    def test_error_discards_outbox(self, runtime, broker, store):
        def half_send(ctx):
            ctx.send_message("sink", {"n": 1})
            raise RuntimeError("after send")

        defn = WorkflowDefinition(kind="err2", init_queue="src", stages=[
            StageRegistration("src", half_send),
            StageRegistration("sink", lambda ctx: None),
        ])
        runtime.register_workflow(defn)
        runtime.start_incident("err2", "x", {})
        pump(runtime, broker)
        assert broker.pending_messages("sink") == []

    def test_other_incident_unaffected_by_freeze(self, runtime, broker, store):
        def maybe_boom(ctx):
            if ctx.message.get("explode"):
                raise RuntimeError("boom")

        defn = WorkflowDefinition(kind="mix", init_queue="q", stages=[
            StageRegistration("q", maybe_boom),
        ])
        runtime.register_workflow(defn)
        bad = runtime.start_incident("mix", "bad", {"explode": True})
        good = runtime.start_incident("mix", "good", {})
        pump(runtime, broker)
        assert store.get_incident(bad).status is IncidentStatus.ERROR
        assert store.get_incident(good).status is IncidentStatus.ACTIVE

    def test_send_to_unknown_queue_is_handler_error(self, runtime, broker, store):
        def wild(ctx):
            ctx.send_message("elsewhere", {})

        defn = WorkflowDefinition(kind="w", init_queue="q", stages=[
            StageRegistration("q", wild),
        ])
        runtime.register_workflow(defn)
        incident = runtime.start_incident("w", "x", {})
        pump(runtime, broker)
        assert store.get_incident(incident).status is IncidentStatus.ERROR

    def test_send_to_other_workflows_queue_rejected(self, runtime, broker, store):
        def cross(ctx):
            ctx.send_message("stage_b2", {})

        runtime.register_workflow(WorkflowDefinition(kind="w1", init_queue="q1", stages=[
            StageRegistration("q1", cross)]))
        runtime.register_workflow(WorkflowDefinition(kind="w2", init_queue="stage_b2", stages=[
            StageRegistration("stage_b2", lambda ctx: None)]))
        incident = runtime.start_incident("w1", "x", {})
        pump(runtime, broker)
        assert store.get_incident(incident).status is IncidentStatus.ERROR

    def test_critical_stage_requeued_while_locked(self, runtime, broker, store):
        ran = []
        defn = WorkflowDefinition(kind="crit", init_queue="c", stages=[
            StageRegistration("c", lambda ctx: ran.append(ctx.message_id), critical=True),
        ])
        runtime.register_workflow(defn)
        incident = runtime.start_incident("crit", "x", {})
        store.try_acquire_lock(incident, "c", "someone-else")
        tag, message = broker.fetch("t", runtime.all_queues())
        runtime.execute_delivery(tag, message)
        assert ran == []  # lock held elsewhere: requeued, body did not run
        assert broker.queue_depth("c") == 1
        store.release_lock(incident, "c")
        pump(runtime, broker)
        assert ran == [message.message_id]
        assert store.lock_holder(incident, "c") is None

    def test_lock_released_after_handler_error(self, runtime, broker, store):
        def boom(ctx):
            raise RuntimeError("x")

        defn = WorkflowDefinition(kind="critfail", init_queue="c", stages=[
            StageRegistration("c", boom, critical=True),
        ])
        runtime.register_workflow(defn)
        incident = runtime.start_incident("critfail", "x", {})
        pump(runtime, broker)
        assert store.lock_holder(incident, "c") is None


class TestJoin:
    def _join_workflow(self, runtime, fired, spec):
        def collector(ctx):
            got = ctx.join_collect(ctx.message["source"], spec)
            if got is not None:
                fired.append(got)

        defn = WorkflowDefinition(kind="join", init_queue="c", stages=[
            StageRegistration("c", collector, critical=True),
        ])
        runtime.register_workflow(defn)
        return runtime.start_incident("join", "x", {"source": "a", "seed": True})

    def test_fires_once_when_complete(self, runtime, broker):
        fired = []
        spec = JoinSpec(frozenset({"a", "b"}))
        incident = self._join_workflow(runtime, fired, spec)
        pump(runtime, broker)  # first input (a) alone: no fire
        assert fired == []
        runtime.inject_external(incident, "c", {"source": "b", "val": 2})
        pump(runtime, broker)
        assert len(fired) == 1
        assert fired[0]["a"]["seed"] is True
        assert fired[0]["b"]["val"] == 2

    def test_duplicate_input_uses_latest(self, runtime, broker):
        fired = []
        spec = JoinSpec(frozenset({"a", "b"}))
        incident = self._join_workflow(runtime, fired, spec)
        runtime.inject_external(incident, "c", {"source": "a", "version": 2})
        pump(runtime, broker)
        assert fired == []
        runtime.inject_external(incident, "c", {"source": "b"})
        pump(runtime, broker)
        assert len(fired) == 1
        assert fired[0]["a"]["version"] == 2

    def test_single_source_fires_immediately(self, runtime, broker):
        fired = []
        self._join_workflow(runtime, fired, JoinSpec(frozenset({"a"})))
        pump(runtime, broker)
        assert len(fired) == 1

    def test_stale_nonsticky_input_blocks_refire(self, runtime, broker):
        fired = []
        spec = JoinSpec(frozenset({"a", "b"}))
        incident = self._join_workflow(runtime, fired, spec)
        runtime.inject_external(incident, "c", {"source": "b"})
        pump(runtime, broker)
        assert len(fired) == 1
        runtime.inject_external(incident, "c", {"source": "b", "fresh": 1})
        pump(runtime, broker)
        assert len(fired) == 1  # a is stale, not sticky: no second firing
        runtime.inject_external(incident, "c", {"source": "a", "fresh": 1})
        pump(runtime, broker)
        assert len(fired) == 2

    def test_sticky_input_carries_over(self, runtime, broker):
        fired = []
        spec = JoinSpec(frozenset({"a", "b"}), sticky=frozenset({"b"}))
        incident = self._join_workflow(runtime, fired, spec)
        runtime.inject_external(incident, "c", {"source": "b", "val": "first"})
        pump(runtime, broker)
        assert len(fired) == 1
        runtime.inject_external(incident, "c", {"source": "a", "gen": 2})
        pump(runtime, broker)
        assert len(fired) == 2
        assert fired[1]["b"]["val"] == "first"  # sticky b reused

    def test_all_sticky_join_never_refires_on_same_set(self, runtime, broker):
        fired = []
        spec = JoinSpec(frozenset({"a"}), sticky=frozenset({"a"}))
        incident = self._join_workflow(runtime, fired, spec)
        pump(runtime, broker)
        assert len(fired) == 1
        runtime.inject_external(incident, "c", {"source": "a", "v": 2})
        pump(runtime, broker)
        assert len(fired) == 2
        # a redelivered check with no new record must not fire again: the
        # candidate set equals the fired one
        runtime.inject_external(incident, "c", {"source": "zzz-ignored"})
        pump(runtime, broker)
        assert len(fired) == 2

    def test_join_on_noncritical_stage_rejected(self, runtime, broker, store):
        def collector(ctx):
            ctx.join_collect("a", JoinSpec(frozenset({"a"})))

        defn = WorkflowDefinition(kind="bad", init_queue="c", stages=[
            StageRegistration("c", collector, critical=False),
        ])
        runtime.register_workflow(defn)
        incident = runtime.start_incident("bad", "x", {})
        pump(runtime, broker)
        assert store.get_incident(incident).status is IncidentStatus.ERROR

    def test_join_exactness_under_redelivery(self, runtime, broker, store):
        """A requeued-then-redelivered join input must not double-fire."""
        fired = []
        spec = JoinSpec(frozenset({"a", "b"}))
        incident = self._join_workflow(runtime, fired, spec)
        pump(runtime, broker)
        # deliver b but hold the lock so it requeues (simulates contention)
        runtime.inject_external(incident, "c", {"source": "b"})
        store.try_acquire_lock(incident, "c", "ghost")
        tag, message = broker.fetch("t", runtime.all_queues())
        runtime.execute_delivery(tag, message)  # requeued
        store.release_lock(incident, "c")
        pump(runtime, broker)
        assert len(fired) == 1


class TestLifecycleAndCleanup:
    def _noop_workflow(self, runtime, kind="lc"):
        defn = WorkflowDefinition(kind=kind, init_queue="noop", stages=[
            StageRegistration("noop", lambda ctx: ctx.persist_stage_data({"ran": True})),
        ])
        runtime.register_workflow(defn)

    def test_cancel_publishes_cleanup(self, runtime, broker, store):
        self._noop_workflow(runtime)
        incident = runtime.start_incident("lc", "x", {})
        runtime.cancel_incident(incident)
        assert store.get_incident(incident).status is IncidentStatus.CANCELLED
        assert broker.queue_depth(CLEANUP_QUEUE) == 1

    def test_cancel_twice_rejected(self, runtime, broker, store):
        self._noop_workflow(runtime)
        incident = runtime.start_incident("lc", "x", {})
        runtime.cancel_incident(incident)
        with pytest.raises(Exception):
            runtime.cancel_incident(incident)

    def test_cleanup_defers_until_messages_resolve(self, runtime, broker, store):
        self._noop_workflow(runtime)
        incident = runtime.start_incident("lc", "x", {})
        for i in range(10):
            runtime.inject_external(incident, "noop", {"n": i})
        runtime.complete_incident(incident)
        pump(runtime, broker, settle=0.02)
        record = store.get_incident(incident)
        assert record.cleared_timestamp is not None
        entries = store.messages_for_incident(incident, exclude_queues=(CLEANUP_QUEUE,))
        terminal = [e.completed_timestamp for e in entries]
        assert all(t is not None for t in terminal)
        assert record.cleared_timestamp >= max(terminal)
        assert store.retrieve_stage_data(incident, "noop") == []

    def test_cleanup_immediate_when_idle(self, runtime, broker, store):
        self._noop_workflow(runtime)
        incident = runtime.start_incident("lc", "x", {})
        pump(runtime, broker)
        runtime.cancel_incident(incident)
        pump(runtime, broker)
        assert store.get_incident(incident).cleared_timestamp is not None

    def test_cleanup_idempotent(self, runtime, broker, store):
        from surgeflow.broker import Message

        self._noop_workflow(runtime)
        incident = runtime.start_incident("lc", "x", {})
        pump(runtime, broker)
        runtime.cancel_incident(incident)
        pump(runtime, broker)
        # crash redelivery of the cleanup message: publish another one
        extra = Message.create(CLEANUP_QUEUE, incident, {})
        store.log_message_event(extra.message_id, MessageStatus.SENT,
                                incident_id=incident, queue=CLEANUP_QUEUE)
        broker.publish(extra)
        pump(runtime, broker)
        assert store.get_message(extra.message_id).status is MessageStatus.COMPLETED

    def test_messages_dropped_after_completion(self, runtime, broker, store):
        self._noop_workflow(runtime)
        incident = runtime.start_incident("lc", "x", {})
        pump(runtime, broker)
        runtime.complete_incident(incident)
        late = runtime.inject_external(incident, "noop", {"late": True})
        pump(runtime, broker, settle=0.02)
        assert store.get_message(late).status is MessageStatus.DROPPED

    def test_task_graph_well_formed(self, runtime, broker, store):
        seen = []
        runtime.register_workflow(two_stage(record=seen))
        incident = runtime.start_incident("flow", "x", {})
        pump(runtime, broker)
        entries = store.messages_for_incident(incident, exclude_queues=(CLEANUP_QUEUE,))
        by_id = {e.message_id: e for e in entries}
        roots = [e for e in entries if e.parent_message_id is None]
        assert len(roots) == 1  # only the incident-initial message
        for entry in entries:
            if entry.parent_message_id is not None:
                parent = by_id[entry.parent_message_id]
                assert parent.status is MessageStatus.COMPLETED
                assert parent.incident_id == entry.incident_id


class TestCriticalSerialization:
    def test_handler_intervals_never_overlap(self, runtime, broker, store):
        """Concurrent manual workers on a critical stage: execution intervals
        for the same (incident, queue) must be disjoint."""
        import time

        intervals = []
        guard = threading.Lock()

        def slow(ctx):
            start = time.monotonic()
            time.sleep(0.02)
            with guard:
                intervals.append((start, time.monotonic()))

        defn = WorkflowDefinition(kind="ser", init_queue="c", stages=[
            StageRegistration("c", slow, critical=True),
        ])
        runtime.register_workflow(defn)
        incident = runtime.start_incident("ser", "x", {})
        for i in range(5):
            runtime.inject_external(incident, "c", {"n": i})

        def worker(consumer):
            idle = 0
            while idle < 40:
                fetched = broker.fetch(consumer, runtime.all_queues())
                if fetched is None:
                    idle += 1
                    time.sleep(0.005)
                    continue
                idle = 0
                runtime.execute_delivery(*fetched)

        threads = [threading.Thread(target=worker, args=(f"w{i}",)) for i in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert len(intervals) == 6
        intervals.sort()
        for (s1, e1), (s2, e2) in zip(intervals, intervals[1:]):
            assert e1 <= s2, "critical handler bodies overlapped"
