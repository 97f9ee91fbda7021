"""Statestore contract: incident lifecycle, message status ordering, stage
persistence, lock atomicity, outstanding counters and statistics."""

import threading

import pytest

from surgeflow.statestore import (
    CounterUnderflow,
    IllegalTransition,
    IncidentStatus,
    MessageStatus,
    StateStore,
    UnknownIncident,
    UnknownMessage,
    UnknownWorkflowKind,
)


@pytest.fixture
def kind(store):
    store.register_workflow_kind("wildfire")
    return "wildfire"


@pytest.fixture
def incident(store, kind):
    return store.create_incident(kind, "La Jonquera")


class TestIncidents:
    def test_create_returns_fresh_id(self, store, kind):
        incident_id = store.create_incident(kind, "La Jonquera")
        record = store.get_incident(incident_id)
        assert record.status is IncidentStatus.PENDING
        assert record.outstanding_messages == 0
        assert record.label == "La Jonquera"

    def test_two_creates_two_ids(self, store, kind):
        assert store.create_incident(kind, "a") != store.create_incident(kind, "b")

    def test_unknown_kind_rejected(self, store):
        with pytest.raises(UnknownWorkflowKind):
            store.create_incident("unknown_kind", "x")

    def test_unknown_incident(self, store):
        with pytest.raises(UnknownIncident):
            store.get_incident("nope")

    def test_pending_to_active(self, store, incident):
        store.set_incident_status(incident, IncidentStatus.ACTIVE)
        assert store.get_incident(incident).status is IncidentStatus.ACTIVE

    def test_terminal_states_frozen(self, store, incident):
        store.set_incident_status(incident, IncidentStatus.ACTIVE)
        store.set_incident_status(incident, IncidentStatus.COMPLETED)
        with pytest.raises(IllegalTransition):
            store.set_incident_status(incident, IncidentStatus.ERROR)

    def test_active_to_error_then_frozen(self, store, incident):
        store.set_incident_status(incident, IncidentStatus.ACTIVE)
        store.set_incident_status(incident, IncidentStatus.ERROR)
        for target in (IncidentStatus.ACTIVE, IncidentStatus.COMPLETED):
            with pytest.raises(IllegalTransition):
                store.set_incident_status(incident, target)

    def test_pending_cannot_jump_to_terminal(self, store, incident):
        with pytest.raises(IllegalTransition):
            store.set_incident_status(incident, IncidentStatus.COMPLETED)


class TestMessageLog:
    def test_happy_path_records_all_timestamps(self, store, incident):
        store.log_message_event("m1", MessageStatus.SENT, incident_id=incident, queue="q",
                                timestamp=100.0)
        store.log_message_event("m1", MessageStatus.DELIVERED, consumer_id="w0",
                                timestamp=102.0)
        store.log_message_event("m1", MessageStatus.PROCESSING)
        store.log_message_event("m1", MessageStatus.COMPLETED, timestamp=105.0)
        entry = store.get_message("m1")
        assert entry.status is MessageStatus.COMPLETED
        assert (entry.sent_timestamp, entry.delivered_timestamp,
                entry.completed_timestamp) == (100.0, 102.0, 105.0)
        assert entry.consumer_id == "w0"

    def test_completed_before_delivered_rejected(self, store, incident):
        store.log_message_event("m1", MessageStatus.SENT, incident_id=incident, queue="q")
        with pytest.raises(IllegalTransition):
            store.log_message_event("m1", MessageStatus.COMPLETED)

    def test_dropped_after_sent(self, store, incident):
        store.log_message_event("m1", MessageStatus.SENT, incident_id=incident, queue="q")
        store.log_message_event("m1", MessageStatus.DROPPED)
        assert store.get_message("m1").status is MessageStatus.DROPPED
        assert store.get_message("m1").completed_timestamp is not None

    def test_dropped_after_processing_rejected(self, store, incident):
        store.log_message_event("m1", MessageStatus.SENT, incident_id=incident, queue="q")
        store.log_message_event("m1", MessageStatus.DELIVERED)
        store.log_message_event("m1", MessageStatus.PROCESSING)
        with pytest.raises(IllegalTransition):
            store.log_message_event("m1", MessageStatus.DROPPED)

    def test_redelivery_allowed_from_processing(self, store, incident):
        store.log_message_event("m1", MessageStatus.SENT, incident_id=incident, queue="q")
        store.log_message_event("m1", MessageStatus.DELIVERED)
        store.log_message_event("m1", MessageStatus.PROCESSING)
        store.log_message_event("m1", MessageStatus.DELIVERED)  # crash redelivery
        store.log_message_event("m1", MessageStatus.PROCESSING)
        store.log_message_event("m1", MessageStatus.COMPLETED)

    def test_terminal_message_frozen(self, store, incident):
        store.log_message_event("m1", MessageStatus.SENT, incident_id=incident, queue="q")
        store.log_message_event("m1", MessageStatus.DELIVERED)
        store.log_message_event("m1", MessageStatus.PROCESSING)
        store.log_message_event("m1", MessageStatus.ERROR)
        with pytest.raises(IllegalTransition):
            store.log_message_event("m1", MessageStatus.DELIVERED)

    def test_duplicate_sent_rejected(self, store, incident):
        store.log_message_event("m1", MessageStatus.SENT, incident_id=incident, queue="q")
        with pytest.raises(IllegalTransition):
            store.log_message_event("m1", MessageStatus.SENT, incident_id=incident, queue="q")

    def test_unknown_message_rejected(self, store):
        with pytest.raises(UnknownMessage):
            store.log_message_event("ghost", MessageStatus.DELIVERED)


class TestStagePersistence:
    def test_sequences_start_at_one(self, store, incident):
        assert store.persist_stage_data(incident, "q", {"a": 1}) == 1

    def test_sequences_monotonic(self, store, incident):
        seqs = [store.persist_stage_data(incident, "q", {"n": i}) for i in range(3)]
        assert seqs == [1, 2, 3]
        records = store.retrieve_stage_data(incident, "q")
        assert [r.payload["n"] for r in records] == [0, 1, 2]

    def test_empty_retrieval(self, store, incident):
        assert store.retrieve_stage_data(incident, "q") == []

    def test_unknown_incident_rejected(self, store):
        with pytest.raises(UnknownIncident):
            store.persist_stage_data("ghost", "q", {})
        with pytest.raises(UnknownIncident):
            store.retrieve_stage_data("ghost", "q")

    def test_sequence_restarts_after_cleanup(self, store, incident):
        store.persist_stage_data(incident, "q", {"n": 1})
        store.persist_stage_data(incident, "q", {"n": 2})
        store.set_incident_status(incident, IncidentStatus.ACTIVE)
        store.set_incident_status(incident, IncidentStatus.CANCELLED)
        store.clear_incident_state(incident)
        assert store.retrieve_stage_data(incident, "q") == []
        assert store.persist_stage_data(incident, "q", {"fresh": True}) == 1

    def test_cross_incident_isolation(self, store, kind):
        incidents = [store.create_incident(kind, f"inc{i}") for i in range(10)]
        for n, incident_id in enumerate(incidents):
            for q in ("qa", "qb"):
                store.persist_stage_data(incident_id, q, {"owner": incident_id, "n": n})
        for incident_id in incidents:
            for q in ("qa", "qb"):
                records = store.retrieve_stage_data(incident_id, q)
                assert len(records) == 1
                assert all(r.incident_id == incident_id for r in records)
                assert all(r.payload["owner"] == incident_id for r in records)


class TestCleanup:
    def test_clear_requires_terminal(self, store, incident):
        store.set_incident_status(incident, IncidentStatus.ACTIVE)
        with pytest.raises(IllegalTransition):
            store.clear_incident_state(incident)

    def test_clear_removes_data_and_locks_keeps_log(self, store, incident):
        store.set_incident_status(incident, IncidentStatus.ACTIVE)
        store.persist_stage_data(incident, "q", {"x": 1})
        store.try_acquire_lock(incident, "q", "w0")
        store.log_message_event("m1", MessageStatus.SENT, incident_id=incident, queue="q")
        store.set_incident_status(incident, IncidentStatus.CANCELLED)
        store.clear_incident_state(incident)
        assert store.retrieve_stage_data(incident, "q") == []
        assert store.locks_for_incident(incident) == []
        assert store.get_message("m1").status is MessageStatus.SENT
        assert store.get_incident(incident).cleared_timestamp is not None


class TestLocks:
    def test_acquire_free_lock(self, store, incident):
        assert store.try_acquire_lock(incident, "q", "w0") is True

    def test_second_acquire_fails(self, store, incident):
        store.try_acquire_lock(incident, "q", "w0")
        assert store.try_acquire_lock(incident, "q", "w1") is False
        assert store.lock_holder(incident, "q") == "w0"

    def test_release_allows_reacquire(self, store, incident):
        store.try_acquire_lock(incident, "q", "w0")
        store.release_lock(incident, "q")
        assert store.try_acquire_lock(incident, "q", "w1") is True

    def test_incident_scoped(self, store, kind):
        a = store.create_incident(kind, "a")
        b = store.create_incident(kind, "b")
        assert store.try_acquire_lock(a, "q", "w0") is True
        assert store.try_acquire_lock(b, "q", "w1") is True

    def test_concurrent_acquire_exactly_one_winner(self, store, incident):
        trials = 200
        workers = 8
        for trial in range(trials):
            queue = f"q{trial}"
            wins = []
            lock = threading.Lock()
            barrier = threading.Barrier(workers)

            def attempt(consumer, queue=queue):
                barrier.wait()
                if store.try_acquire_lock(incident, queue, consumer):
                    with lock:
                        wins.append(consumer)

            threads = [threading.Thread(target=attempt, args=(f"w{i}",))
                       for i in range(workers)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            assert len(wins) == 1

    def test_release_all(self, store, incident):
        store.try_acquire_lock(incident, "q1", "w0")
        store.try_acquire_lock(incident, "q2", "w0")
        assert store.release_all_locks() == 2
        assert store.try_acquire_lock(incident, "q1", "w1") is True


class TestOutstandingCounter:
    def test_increment_then_decrement(self, store, incident):
        assert store.adjust_outstanding(incident, +1) == 1
        assert store.adjust_outstanding(incident, -1) == 0

    def test_floor_at_zero(self, store, incident):
        with pytest.raises(CounterUnderflow):
            store.adjust_outstanding(incident, -1)

    def test_unknown_incident(self, store):
        with pytest.raises(UnknownIncident):
            store.adjust_outstanding("ghost", +1)

    def test_concurrent_adjustments_conserve(self, store, incident):
        for _ in range(50):
            store.adjust_outstanding(incident, +1)

        def bump(delta):
            for _ in range(50):
                store.adjust_outstanding(incident, delta)

        up = threading.Thread(target=bump, args=(+1,))
        down = threading.Thread(target=bump, args=(-1,))
        up.start(), down.start()
        up.join(), down.join()
        assert store.outstanding(incident) == 50


class TestStatistics:
    def _complete(self, store, incident, mid, queue, sent, delivered, completed):
        store.log_message_event(mid, MessageStatus.SENT, incident_id=incident,
                                queue=queue, timestamp=sent)
        store.log_message_event(mid, MessageStatus.DELIVERED, timestamp=delivered)
        store.log_message_event(mid, MessageStatus.PROCESSING)
        store.log_message_event(mid, MessageStatus.COMPLETED, timestamp=completed)

    def test_wait_and_processing_arithmetic(self, store, kind, incident):
        self._complete(store, incident, "m1", "q", sent=0.0, delivered=2.0, completed=5.0)
        stats = store.stage_statistics(workflow_kind=kind)
        assert stats["q"].count == 1
        assert stats["q"].mean_wait == pytest.approx(2.0)
        assert stats["q"].mean_processing == pytest.approx(3.0)

    def test_only_completed_entries_counted(self, store, kind, incident):
        store.log_message_event("m1", MessageStatus.SENT, incident_id=incident, queue="q")
        assert store.stage_statistics(workflow_kind=kind) == {}

    def test_aggregation(self, store, kind, incident):
        self._complete(store, incident, "m1", "q", 0.0, 1.0, 2.0)
        self._complete(store, incident, "m2", "q", 0.0, 3.0, 6.0)
        stats = store.stage_statistics(incident_id=incident)
        assert stats["q"].count == 2
        assert stats["q"].mean_wait == pytest.approx(2.0)
        assert stats["q"].max_wait == pytest.approx(3.0)
        assert stats["q"].mean_processing == pytest.approx(2.0)
        assert stats["q"].max_processing == pytest.approx(3.0)

    def test_exclude_queues(self, store, kind, incident):
        self._complete(store, incident, "m1", "_cleanup", 0.0, 1.0, 2.0)
        assert store.stage_statistics(workflow_kind=kind,
                                      exclude_queues=("_cleanup",)) == {}


def test_kinds_register_idempotent(store):
    store.register_workflow_kind("a")
    store.register_workflow_kind("a")
    assert store.workflow_kinds() == ["a"]


def test_reopen_preserves_state(data_dir):
    s = StateStore(data_dir / "state.sqlite3")
    s.register_workflow_kind("k")
    incident = s.create_incident("k", "x")
    s.persist_stage_data(incident, "q", {"n": 1})
    s.close()
    s2 = StateStore(data_dir / "state.sqlite3")
    assert s2.get_incident(incident).label == "x"
    assert len(s2.retrieve_stage_data(incident, "q")) == 1
    s2.close()
