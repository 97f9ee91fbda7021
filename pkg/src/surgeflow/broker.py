"""Durable named FIFO message queues with single-consumer delivery.

Each queue is backed by an append-only log of length-prefixed JSON records
(ENQUEUE/DELIVER/ACK/REQUEUE). Replaying a log from an empty state reproduces
the pending and in-flight sets exactly, which is what makes `recover()` able
to put crashed-in-flight work back at the head of its queue.
"""

from __future__ import annotations

import json
import logging
import os
import re
import struct
import threading
import time
import uuid
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

logger = logging.getLogger(__name__)

DEFAULT_PAYLOAD_CAP = 64 * 1024
DEFAULT_REQUEUE_DELAY = 0.1

# Record kinds in the queue log.
ENQUEUE = "ENQUEUE"
DELIVER = "DELIVER"
ACK = "ACK"
REQUEUE = "REQUEUE"

_LEN = struct.Struct(">I")
_NAME_RE = re.compile(r"^[A-Za-z0-9_.-]+$")


class BrokerError(Exception):
    """Base class for broker failures."""


class InvalidQueueName(BrokerError):
    pass


class UnknownQueue(BrokerError):
    pass


class PayloadTooLarge(BrokerError):
    pass


class UnknownDeliveryTag(BrokerError):
    pass


@dataclass
class Message:
    """Unit of work: an incident-tagged envelope carrying data handles, not data."""

    message_id: str
    queue: str
    incident_id: str
    payload: dict
    parent_message_id: str | None = None
    enqueue_timestamp: float = 0.0
    delivery_count: int = 0

    @staticmethod
    def create(queue: str, incident_id: str, payload: dict,
               parent_message_id: str | None = None) -> "Message":
        return Message(
            message_id=uuid.uuid4().hex,
            queue=queue,
            incident_id=incident_id,
            payload=payload,
            parent_message_id=parent_message_id,
            enqueue_timestamp=time.time(),
        )

    def to_doc(self) -> dict:
        return {
            "message_id": self.message_id,
            "queue": self.queue,
            "incident_id": self.incident_id,
            "parent_message_id": self.parent_message_id,
            "payload": self.payload,
            "enqueue_timestamp": self.enqueue_timestamp,
            "delivery_count": self.delivery_count,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "Message":
        return cls(
            message_id=doc["message_id"],
            queue=doc["queue"],
            incident_id=doc["incident_id"],
            payload=doc["payload"],
            parent_message_id=doc.get("parent_message_id"),
            enqueue_timestamp=doc.get("enqueue_timestamp", 0.0),
            delivery_count=doc.get("delivery_count", 0),
        )


@dataclass(frozen=True)
class DeliveryTag:
    """Opaque token for one in-flight delivery; exactly one unresolved tag per message."""

    tag: str
    consumer_id: str


def payload_size(payload: dict) -> int:
    return len(json.dumps(payload, separators=(",", ":")).encode("utf-8"))


class _QueueLog:
    """Append-only record log for one queue: 4-byte big-endian length + JSON body."""

    def __init__(self, path: Path, fsync: bool):
        self.path = path
        self._fsync = fsync
        self._fh = open(path, "ab")

    def append(self, kind: str, message_id: str, message_doc: dict | None = None) -> None:
        rec = {"kind": kind, "message_id": message_id, "timestamp": time.time()}
        if message_doc is not None:
            rec["message"] = message_doc
        body = json.dumps(rec, separators=(",", ":")).encode("utf-8")
        self._fh.write(_LEN.pack(len(body)) + body)
        self._fh.flush()
        if self._fsync:
            os.fsync(self._fh.fileno())

    def close(self) -> None:
        self._fh.close()

    def rewrite(self, records: Iterable[tuple[str, str, dict | None]]) -> None:
        """Replace the log contents atomically enough for single-process use."""
        self._fh.close()
        tmp = self.path.with_suffix(".log.tmp")
        with open(tmp, "wb") as out:
            for kind, message_id, doc in records:
                rec = {"kind": kind, "message_id": message_id, "timestamp": time.time()}
                if doc is not None:
                    rec["message"] = doc
                body = json.dumps(rec, separators=(",", ":")).encode("utf-8")
                out.write(_LEN.pack(len(body)) + body)
        tmp.replace(self.path)
        self._fh = open(self.path, "ab")

    @staticmethod
    def replay(path: Path) -> tuple[list[dict], int]:
        """Read records from a log, truncating a torn tail in place.

        Returns (records, truncated_count) where truncated_count is 1 when a
        torn/corrupt final record was dropped.
        """
        data = path.read_bytes()
        records: list[dict] = []
        offset = 0
        truncated = 0
        while offset + _LEN.size <= len(data):
            (length,) = _LEN.unpack_from(data, offset)
            start = offset + _LEN.size
            end = start + length
            if end > len(data):
                truncated = 1
                break
            try:
                records.append(json.loads(data[start:end]))
            except ValueError:
                truncated = 1
                break
            offset = end
        else:
            if offset != len(data):
                truncated = 1
        if truncated:
            logger.warning("queue log %s has a torn tail; truncating to %d bytes", path, offset)
            with open(path, "r+b") as fh:
                fh.truncate(offset)
        return records, truncated


@dataclass
class _Entry:
    message: Message
    not_before: float = 0.0  # monotonic time before which fetch skips this entry


class _Queue:
    def __init__(self, name: str, log: _QueueLog):
        self.name = name
        self.log = log
        self.ready: deque[_Entry] = deque()
        # Messages that the log shows as delivered-but-unresolved; populated by
        # replay and drained by recover().
        self.orphans: list[Message] = []
        self.record_count = 0


class _InFlight:
    __slots__ = ("queue", "message", "consumer_id")

    def __init__(self, queue: str, message: Message, consumer_id: str):
        self.queue = queue
        self.message = message
        self.consumer_id = consumer_id


class Broker:
    """Thread-safe durable FIFO broker; all mutations are atomic per the shared lock.

    Single-consumer delivery: fetch() hands each message to exactly one
    consumer, which must resolve the delivery with ack() or requeue().
    Consumers hold at most one in-flight message at a time (prefetch 1).
    """

    def __init__(self, data_dir: str | Path, *,
                 payload_cap: int = DEFAULT_PAYLOAD_CAP,
                 requeue_delay: float = DEFAULT_REQUEUE_DELAY,
                 fsync: bool = False,
                 compact_dead_ratio: float = 0.5):
        self.data_dir = Path(data_dir)
        self.queues_dir = self.data_dir / "queues"
        self.queues_dir.mkdir(parents=True, exist_ok=True)
        self.payload_cap = payload_cap
        self.requeue_delay = requeue_delay
        self._fsync = fsync
        self._compact_dead_ratio = compact_dead_ratio
        self._lock = threading.RLock()
        self._queues: dict[str, _Queue] = {}
        self._inflight: dict[str, _InFlight] = {}
        self._consumer_tag: dict[str, str] = {}
        self._rotation: dict[str, int] = {}
        self._closed = False
        for log_path in sorted(self.queues_dir.glob("*.log")):
            self._load_queue(log_path.stem)

    # -- lifecycle ---------------------------------------------------------

    def close(self) -> None:
        with self._lock:
            if self._closed:
                return
            for q in self._queues.values():
                q.log.close()
            self._closed = True

    def recover(self) -> int:
        """Restore delivered-but-unresolved messages to the head of their queues.

        Must run at startup before any consumer attaches. Returns how many
        messages were restored. Logs with a majority of dead records are
        compacted down to the live set.
        """
        with self._lock:
            if self._inflight:
                raise BrokerError("recover() requires no attached consumers")
            restored = 0
            for q in self._queues.values():
                if q.orphans:
                    restored += len(q.orphans)
                    for msg in reversed(q.orphans):
                        q.ready.appendleft(_Entry(msg))
                    q.orphans.clear()
                live = len(q.ready)
                if q.record_count and (q.record_count - live) / q.record_count > self._compact_dead_ratio:
                    self._compact(q)
            if restored:
                logger.info("recovered %d in-flight message(s)", restored)
            return restored

    def compact(self) -> None:
        """Rewrite every queue log to just its pending messages. No in-flight allowed."""
        with self._lock:
            if self._inflight:
                raise BrokerError("compact() requires no in-flight deliveries")
            for q in self._queues.values():
                self._compact(q)

    def _compact(self, q: _Queue) -> None:
        q.log.rewrite((ENQUEUE, e.message.message_id, e.message.to_doc()) for e in q.ready)
        q.record_count = len(q.ready)

    # -- queue management ---------------------------------------------------

    def declare_queue(self, name: str) -> None:
        """Create a durable queue; idempotent when it already exists."""
        if not isinstance(name, str) or not _NAME_RE.match(name or ""):
            raise InvalidQueueName(
                f"queue name must be non-empty and contain only [A-Za-z0-9_.-]: {name!r}")
        with self._lock:
            if name not in self._queues:
                self._load_queue(name)

    def _load_queue(self, name: str) -> None:
        path = self.queues_dir / f"{name}.log"
        existed = path.exists()
        if not existed:
            path.touch()
        records: list[dict] = []
        if existed:
            records, _ = _QueueLog.replay(path)
        q = _Queue(name, _QueueLog(path, self._fsync))
        q.record_count = len(records)
        pending: dict[str, Message] = {}
        inflight: dict[str, Message] = {}
        for rec in records:
            kind = rec.get("kind")
            mid = rec.get("message_id")
            if kind == ENQUEUE:
                pending[mid] = Message.from_doc(rec["message"])
            elif kind == DELIVER:
                msg = pending.pop(mid, None) or inflight.pop(mid, None)
                if msg is not None:
                    msg.delivery_count += 1
                    inflight[mid] = msg
            elif kind == ACK:
                inflight.pop(mid, None)
                pending.pop(mid, None)
            elif kind == REQUEUE:
                msg = inflight.pop(mid, None)
                if msg is not None:
                    pending[mid] = msg
        q.ready.extend(_Entry(m) for m in pending.values())
        q.orphans = list(inflight.values())
        self._queues[name] = q

    def queue_names(self) -> list[str]:
        with self._lock:
            return sorted(self._queues)

    def queue_depth(self, name: str) -> int:
        with self._lock:
            return len(self._require(name).ready)

    def pending_messages(self, name: str) -> list[Message]:
        """Snapshot of fetchable + delayed messages, in queue order (for tests/inspection)."""
        with self._lock:
            return [e.message for e in self._require(name).ready]

    def inflight_count(self) -> int:
        with self._lock:
            return len(self._inflight)

    def _require(self, name: str) -> _Queue:
        q = self._queues.get(name)
        if q is None:
            raise UnknownQueue(f"queue not declared: {name!r}")
        return q

    # -- messaging ----------------------------------------------------------

    def publish(self, message: Message) -> str:
        with self._lock:
            q = self._require(message.queue)
            size = payload_size(message.payload)
            if size > self.payload_cap:
                raise PayloadTooLarge(
                    f"payload is {size} bytes; cap is {self.payload_cap} (send a data handle instead)")
            if not message.enqueue_timestamp:
                message.enqueue_timestamp = time.time()
            q.log.append(ENQUEUE, message.message_id, message.to_doc())
            q.record_count += 1
            q.ready.append(_Entry(message))
            return message.message_id

    def fetch(self, consumer_id: str,
              subscriptions: Iterable[str]) -> Optional[tuple[DeliveryTag, Message]]:
        """Round-robin across the consumer's subscribed queues, FIFO within each.

        Returns None when nothing is fetchable. Messages inside their requeue
        delay are skipped without disturbing queue order.
        """
        names = sorted(set(subscriptions))
        with self._lock:
            if self._consumer_tag.get(consumer_id):
                raise BrokerError(
                    f"consumer {consumer_id!r} already holds an unresolved delivery")
            queues = [self._require(n) for n in names]
            if not queues:
                return None
            now = time.monotonic()
            start = self._rotation.get(consumer_id, 0) % len(queues)
            for i in range(len(queues)):
                q = queues[(start + i) % len(queues)]
                entry = self._take_fetchable(q, now)
                if entry is None:
                    continue
                msg = entry.message
                msg.delivery_count += 1
                q.log.append(DELIVER, msg.message_id)
                q.record_count += 1
                tag = DeliveryTag(tag=uuid.uuid4().hex, consumer_id=consumer_id)
                self._inflight[tag.tag] = _InFlight(q.name, msg, consumer_id)
                self._consumer_tag[consumer_id] = tag.tag
                self._rotation[consumer_id] = (start + i + 1) % len(queues)
                return tag, msg
            return None

    @staticmethod
    def _take_fetchable(q: _Queue, now: float) -> _Entry | None:
        for idx, entry in enumerate(q.ready):
            if entry.not_before <= now:
                del q.ready[idx]
                return entry
        return None

    def ack(self, tag: DeliveryTag) -> None:
        """Permanently remove a delivered message."""
        with self._lock:
            inflight = self._resolve(tag)
            q = self._require(inflight.queue)
            q.log.append(ACK, inflight.message.message_id)
            q.record_count += 1

    def requeue(self, tag: DeliveryTag) -> None:
        """Return a delivered message to the tail of its queue, fetchable after the requeue delay."""
        with self._lock:
            inflight = self._resolve(tag)
            q = self._require(inflight.queue)
            q.log.append(REQUEUE, inflight.message.message_id)
            q.record_count += 1
            q.ready.append(_Entry(inflight.message,
                                  not_before=time.monotonic() + self.requeue_delay))

    def _resolve(self, tag: DeliveryTag) -> _InFlight:
        inflight = self._inflight.pop(tag.tag, None)
        if inflight is None:
            raise UnknownDeliveryTag(f"unknown or already-resolved delivery tag: {tag.tag}")
        self._consumer_tag.pop(inflight.consumer_id, None)
        return inflight
