"""Transactional store of incidents, message status, stage persistence and locks.

Backed by a single embedded sqlite database. One shared connection guarded by
an RLock keeps every operation atomic and linearizable, which is what the lock
and outstanding-counter protocols rely on.
"""

from __future__ import annotations

import json
import sqlite3
import threading
import time
import uuid
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable


class StateStoreError(Exception):
    """Base class for statestore failures."""


class UnknownIncident(StateStoreError):
    pass


class UnknownWorkflowKind(StateStoreError):
    pass


class UnknownMessage(StateStoreError):
    pass


class IllegalTransition(StateStoreError):
    pass


class CounterUnderflow(StateStoreError):
    pass


class IncidentStatus(str, Enum):
    PENDING = "PENDING"
    ACTIVE = "ACTIVE"
    COMPLETED = "COMPLETED"
    CANCELLED = "CANCELLED"
    ERROR = "ERROR"

    @property
    def terminal(self) -> bool:
        return self in (IncidentStatus.COMPLETED, IncidentStatus.CANCELLED, IncidentStatus.ERROR)


class MessageStatus(str, Enum):
    SENT = "SENT"
    DELIVERED = "DELIVERED"
    PROCESSING = "PROCESSING"
    COMPLETED = "COMPLETED"
    ERROR = "ERROR"
    DROPPED = "DROPPED"

    @property
    def terminal(self) -> bool:
        return self in (MessageStatus.COMPLETED, MessageStatus.ERROR, MessageStatus.DROPPED)


_INCIDENT_TRANSITIONS: dict[IncidentStatus, set[IncidentStatus]] = {
    IncidentStatus.PENDING: {IncidentStatus.ACTIVE},
    IncidentStatus.ACTIVE: {IncidentStatus.COMPLETED, IncidentStatus.CANCELLED, IncidentStatus.ERROR},
    IncidentStatus.COMPLETED: set(),
    IncidentStatus.CANCELLED: set(),
    IncidentStatus.ERROR: set(),
}

# DELIVERED may recur (requeue and crash redelivery); DROPPED only from
# SENT/DELIVERED; terminal statuses never change.
_MESSAGE_TRANSITIONS: dict[MessageStatus, set[MessageStatus]] = {
    MessageStatus.SENT: {MessageStatus.DELIVERED, MessageStatus.DROPPED},
    MessageStatus.DELIVERED: {MessageStatus.DELIVERED, MessageStatus.PROCESSING, MessageStatus.DROPPED},
    MessageStatus.PROCESSING: {MessageStatus.COMPLETED, MessageStatus.ERROR, MessageStatus.DELIVERED},
    MessageStatus.COMPLETED: set(),
    MessageStatus.ERROR: set(),
    MessageStatus.DROPPED: set(),
}


@dataclass
class IncidentRecord:
    incident_id: str
    workflow_kind: str
    label: str
    status: IncidentStatus
    created_timestamp: float
    status_changed_timestamp: float
    outstanding_messages: int
    cleared_timestamp: float | None = None


@dataclass
class MessageLogEntry:
    message_id: str
    incident_id: str
    queue: str
    parent_message_id: str | None
    status: MessageStatus
    sent_timestamp: float
    delivered_timestamp: float | None
    completed_timestamp: float | None
    consumer_id: str | None


@dataclass
class PersistedStageRecord:
    incident_id: str
    queue: str
    sequence: int
    stored_timestamp: float
    payload: dict


@dataclass
class StageStats:
    queue: str
    count: int
    mean_wait: float
    max_wait: float
    mean_processing: float
    max_processing: float


_SCHEMA = """
CREATE TABLE IF NOT EXISTS workflow_kinds (
    kind TEXT PRIMARY KEY
);
CREATE TABLE IF NOT EXISTS incidents (
    incident_id TEXT PRIMARY KEY,
    workflow_kind TEXT NOT NULL,
    label TEXT NOT NULL,
    status TEXT NOT NULL,
    created_ts REAL NOT NULL,
    status_changed_ts REAL NOT NULL,
    outstanding INTEGER NOT NULL DEFAULT 0,
    cleared_ts REAL
);
CREATE TABLE IF NOT EXISTS messages (
    message_id TEXT PRIMARY KEY,
    incident_id TEXT NOT NULL,
    queue TEXT NOT NULL,
    parent_message_id TEXT,
    status TEXT NOT NULL,
    sent_ts REAL NOT NULL,
    delivered_ts REAL,
    completed_ts REAL,
    consumer_id TEXT
);
CREATE INDEX IF NOT EXISTS idx_messages_incident ON messages (incident_id, sent_ts);
CREATE TABLE IF NOT EXISTS stage_data (
    incident_id TEXT NOT NULL,
    queue TEXT NOT NULL,
    sequence INTEGER NOT NULL,
    stored_ts REAL NOT NULL,
    payload TEXT NOT NULL,
    PRIMARY KEY (incident_id, queue, sequence)
);
CREATE TABLE IF NOT EXISTS stage_locks (
    incident_id TEXT NOT NULL,
    queue TEXT NOT NULL,
    holder TEXT NOT NULL,
    acquired_ts REAL NOT NULL,
    PRIMARY KEY (incident_id, queue)
);
"""


class StateStore:
    """Source of truth for workflow progress; safe under concurrent callers."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.RLock()
        self._conn = sqlite3.connect(str(self.path), check_same_thread=False)
        self._conn.execute("PRAGMA journal_mode=WAL")
        self._conn.execute("PRAGMA synchronous=NORMAL")
        with self._lock, self._conn:
            self._conn.executescript(_SCHEMA)

    def close(self) -> None:
        with self._lock:
            self._conn.close()

    # -- workflow kinds -----------------------------------------------------

    def register_workflow_kind(self, kind: str) -> None:
        with self._lock, self._conn:
            self._conn.execute("INSERT OR IGNORE INTO workflow_kinds (kind) VALUES (?)", (kind,))

    def workflow_kinds(self) -> list[str]:
        with self._lock:
            rows = self._conn.execute("SELECT kind FROM workflow_kinds ORDER BY kind").fetchall()
        return [r[0] for r in rows]

    # -- incidents ----------------------------------------------------------

    def create_incident(self, workflow_kind: str, label: str) -> str:
        incident_id = uuid.uuid4().hex
        now = time.time()
        with self._lock, self._conn:
            known = self._conn.execute(
                "SELECT 1 FROM workflow_kinds WHERE kind = ?", (workflow_kind,)).fetchone()
            if known is None:
                raise UnknownWorkflowKind(f"workflow kind not registered: {workflow_kind!r}")
            self._conn.execute(
                "INSERT INTO incidents (incident_id, workflow_kind, label, status, created_ts,"
                " status_changed_ts, outstanding) VALUES (?, ?, ?, ?, ?, ?, 0)",
                (incident_id, workflow_kind, label, IncidentStatus.PENDING.value, now, now))
        return incident_id

    def get_incident(self, incident_id: str) -> IncidentRecord:
        with self._lock:
            row = self._conn.execute(
                "SELECT incident_id, workflow_kind, label, status, created_ts, status_changed_ts,"
                " outstanding, cleared_ts FROM incidents WHERE incident_id = ?",
                (incident_id,)).fetchone()
        if row is None:
            raise UnknownIncident(f"unknown incident: {incident_id!r}")
        return IncidentRecord(row[0], row[1], row[2], IncidentStatus(row[3]), row[4], row[5],
                              row[6], row[7])

    def list_incidents(self) -> list[IncidentRecord]:
        with self._lock:
            rows = self._conn.execute(
                "SELECT incident_id FROM incidents ORDER BY created_ts").fetchall()
        return [self.get_incident(r[0]) for r in rows]

    def set_incident_status(self, incident_id: str, new_status: IncidentStatus) -> None:
        with self._lock, self._conn:
            current = self.get_incident(incident_id).status
            if new_status not in _INCIDENT_TRANSITIONS[current]:
                raise IllegalTransition(
                    f"incident {incident_id}: {current.value} -> {new_status.value} not allowed")
            self._conn.execute(
                "UPDATE incidents SET status = ?, status_changed_ts = ? WHERE incident_id = ?",
                (new_status.value, time.time(), incident_id))

    def adjust_outstanding(self, incident_id: str, delta: int) -> int:
        """Atomic fetch-and-add on the incident's outstanding-message counter."""
        with self._lock, self._conn:
            row = self._conn.execute(
                "SELECT outstanding FROM incidents WHERE incident_id = ?",
                (incident_id,)).fetchone()
            if row is None:
                raise UnknownIncident(f"unknown incident: {incident_id!r}")
            new = row[0] + delta
            if new < 0:
                raise CounterUnderflow(
                    f"incident {incident_id}: outstanding would go negative ({row[0]} {delta:+d})")
            self._conn.execute(
                "UPDATE incidents SET outstanding = ? WHERE incident_id = ?", (new, incident_id))
            return new

    def outstanding(self, incident_id: str) -> int:
        return self.get_incident(incident_id).outstanding_messages

    def clear_incident_state(self, incident_id: str) -> None:
        """Drop stage persistence and locks for a terminal incident; keep the message log."""
        with self._lock, self._conn:
            incident = self.get_incident(incident_id)
            if not incident.status.terminal:
                raise IllegalTransition(
                    f"incident {incident_id} is {incident.status.value}; cleanup needs a terminal status")
            self._conn.execute("DELETE FROM stage_data WHERE incident_id = ?", (incident_id,))
            self._conn.execute("DELETE FROM stage_locks WHERE incident_id = ?", (incident_id,))
            self._conn.execute(
                "UPDATE incidents SET cleared_ts = ? WHERE incident_id = ?",
                (time.time(), incident_id))

    # -- message log --------------------------------------------------------

    def log_message_event(self, message_id: str, event: MessageStatus, *,
                          incident_id: str | None = None,
                          queue: str | None = None,
                          parent_message_id: str | None = None,
                          consumer_id: str | None = None,
                          timestamp: float | None = None) -> None:
        ts = time.time() if timestamp is None else timestamp
        with self._lock, self._conn:
            if event is MessageStatus.SENT:
                if incident_id is None or queue is None:
                    raise StateStoreError("SENT events need incident_id and queue")
                try:
                    self._conn.execute(
                        "INSERT INTO messages (message_id, incident_id, queue, parent_message_id,"
                        " status, sent_ts) VALUES (?, ?, ?, ?, ?, ?)",
                        (message_id, incident_id, queue, parent_message_id,
                         MessageStatus.SENT.value, ts))
                except sqlite3.IntegrityError as exc:
                    raise IllegalTransition(f"message {message_id} already logged SENT") from exc
                return
            row = self._conn.execute(
                "SELECT status FROM messages WHERE message_id = ?", (message_id,)).fetchone()
            if row is None:
                raise UnknownMessage(f"no SENT entry for message {message_id!r}")
            current = MessageStatus(row[0])
            if event not in _MESSAGE_TRANSITIONS[current]:
                raise IllegalTransition(
                    f"message {message_id}: {current.value} -> {event.value} out of order")
            sets = ["status = ?"]
            args: list = [event.value]
            if event is MessageStatus.DELIVERED:
                sets.append("delivered_ts = ?")
                args.append(ts)
                if consumer_id is not None:
                    sets.append("consumer_id = ?")
                    args.append(consumer_id)
            elif event.terminal:
                sets.append("completed_ts = ?")
                args.append(ts)
            args.append(message_id)
            self._conn.execute(f"UPDATE messages SET {', '.join(sets)} WHERE message_id = ?", args)

    def get_message(self, message_id: str) -> MessageLogEntry:
        with self._lock:
            row = self._conn.execute(
                "SELECT message_id, incident_id, queue, parent_message_id, status, sent_ts,"
                " delivered_ts, completed_ts, consumer_id FROM messages WHERE message_id = ?",
                (message_id,)).fetchone()
        if row is None:
            raise UnknownMessage(f"unknown message: {message_id!r}")
        return self._entry(row)

    def messages_for_incident(self, incident_id: str,
                              exclude_queues: Iterable[str] = ()) -> list[MessageLogEntry]:
        excluded = set(exclude_queues)
        with self._lock:
            rows = self._conn.execute(
                "SELECT message_id, incident_id, queue, parent_message_id, status, sent_ts,"
                " delivered_ts, completed_ts, consumer_id FROM messages WHERE incident_id = ?"
                " ORDER BY sent_ts, message_id", (incident_id,)).fetchall()
        return [self._entry(r) for r in rows if r[2] not in excluded]

    @staticmethod
    def _entry(row) -> MessageLogEntry:
        return MessageLogEntry(row[0], row[1], row[2], row[3], MessageStatus(row[4]),
                               row[5], row[6], row[7], row[8])

    # -- stage persistence ----------------------------------------------------

    def persist_stage_data(self, incident_id: str, queue: str, payload: dict) -> int:
        with self._lock, self._conn:
            self.get_incident(incident_id)
            row = self._conn.execute(
                "SELECT COALESCE(MAX(sequence), 0) FROM stage_data WHERE incident_id = ? AND queue = ?",
                (incident_id, queue)).fetchone()
            sequence = row[0] + 1
            self._conn.execute(
                "INSERT INTO stage_data (incident_id, queue, sequence, stored_ts, payload)"
                " VALUES (?, ?, ?, ?, ?)",
                (incident_id, queue, sequence, time.time(), json.dumps(payload)))
            return sequence

    def retrieve_stage_data(self, incident_id: str, queue: str) -> list[PersistedStageRecord]:
        with self._lock:
            self.get_incident(incident_id)
            rows = self._conn.execute(
                "SELECT incident_id, queue, sequence, stored_ts, payload FROM stage_data"
                " WHERE incident_id = ? AND queue = ? ORDER BY sequence",
                (incident_id, queue)).fetchall()
        return [PersistedStageRecord(r[0], r[1], r[2], r[3], json.loads(r[4])) for r in rows]

    # -- stage locks ----------------------------------------------------------

    def try_acquire_lock(self, incident_id: str, queue: str, consumer_id: str) -> bool:
        """Atomic test-and-set: True iff this call created the lock row."""
        with self._lock, self._conn:
            cur = self._conn.execute(
                "INSERT OR IGNORE INTO stage_locks (incident_id, queue, holder, acquired_ts)"
                " VALUES (?, ?, ?, ?)", (incident_id, queue, consumer_id, time.time()))
            return cur.rowcount == 1

    def release_lock(self, incident_id: str, queue: str) -> None:
        with self._lock, self._conn:
            self._conn.execute(
                "DELETE FROM stage_locks WHERE incident_id = ? AND queue = ?",
                (incident_id, queue))

    def release_all_locks(self) -> int:
        """Startup sweep: locks can only be held by live workers, so none are valid here."""
        with self._lock, self._conn:
            cur = self._conn.execute("DELETE FROM stage_locks")
            return cur.rowcount

    def lock_holder(self, incident_id: str, queue: str) -> str | None:
        with self._lock:
            row = self._conn.execute(
                "SELECT holder FROM stage_locks WHERE incident_id = ? AND queue = ?",
                (incident_id, queue)).fetchone()
        return row[0] if row else None

    def locks_for_incident(self, incident_id: str) -> list[tuple[str, str]]:
        with self._lock:
            rows = self._conn.execute(
                "SELECT queue, holder FROM stage_locks WHERE incident_id = ?",
                (incident_id,)).fetchall()
        return [(r[0], r[1]) for r in rows]

    # -- statistics -----------------------------------------------------------

    def stage_statistics(self, *, workflow_kind: str | None = None,
                         incident_id: str | None = None,
                         exclude_queues: Iterable[str] = ()) -> dict[str, StageStats]:
        """Per-queue wait/processing aggregates over COMPLETED entries.

        Queue-wait is delivered - sent; processing is completed - delivered.
        """
        where = ["m.status = ?"]
        args: list = [MessageStatus.COMPLETED.value]
        if incident_id is not None:
            where.append("m.incident_id = ?")
            args.append(incident_id)
        if workflow_kind is not None:
            where.append("i.workflow_kind = ?")
            args.append(workflow_kind)
        sql = (
            "SELECT m.queue, COUNT(*),"
            " AVG(m.delivered_ts - m.sent_ts), MAX(m.delivered_ts - m.sent_ts),"
            " AVG(m.completed_ts - m.delivered_ts), MAX(m.completed_ts - m.delivered_ts)"
            " FROM messages m JOIN incidents i ON i.incident_id = m.incident_id"
            f" WHERE {' AND '.join(where)} GROUP BY m.queue ORDER BY m.queue")
        excluded = set(exclude_queues)
        with self._lock:
            rows = self._conn.execute(sql, args).fetchall()
        return {r[0]: StageStats(r[0], r[1], r[2], r[3], r[4], r[5])
                for r in rows if r[0] not in excluded}
