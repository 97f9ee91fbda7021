"""Task-farm worker pool: every worker subscribes to every queue, holds one
in-flight message at a time, and can be scaled up or down at runtime."""

from __future__ import annotations

import logging
import threading
import time
import uuid
from dataclasses import dataclass

from .broker import Broker
from .wfcore import AbandonedDelivery, WorkflowRuntime

logger = logging.getLogger(__name__)

DEFAULT_IDLE_POLL_INTERVAL = 0.02


class WorkerPoolError(Exception):
    pass


@dataclass
class WorkerPoolConfig:
    worker_count: int = 4
    idle_poll_interval: float = DEFAULT_IDLE_POLL_INTERVAL

    def __post_init__(self):
        if self.worker_count < 1:
            raise WorkerPoolError("worker_count must be >= 1")


class _Worker:
    def __init__(self, pool: "WorkerPool", index: int):
        self.consumer_id = f"worker-{index}-{uuid.uuid4().hex[:8]}"
        self.retire = threading.Event()
        self.thread = threading.Thread(
            target=pool._run_worker, args=(self,), name=self.consumer_id, daemon=True)


class WorkerPool:
    """Pool of concurrent consumer loops: fetch -> execute_delivery -> repeat.

    Surplus workers retire only between messages, so scaling down never aborts
    a running handler. A hard stop (drain=False) abandons in-flight deliveries
    unacked; broker recovery redelivers them after restart.
    """

    def __init__(self, broker: Broker, runtime: WorkflowRuntime, config: WorkerPoolConfig):
        self.broker = broker
        self.runtime = runtime
        self.config = config
        self._lock = threading.Lock()
        self._workers: list[_Worker] = []
        self._next_index = 0
        self._stop = threading.Event()
        self._started = False

    def start(self) -> "WorkerPool":
        with self._lock:
            if self._started:
                raise WorkerPoolError("pool already started")
            self._started = True
            self.runtime.abort_event.clear()  # a fresh pool is not aborting
            self._spawn(self.config.worker_count)
        return self

    def _spawn(self, count: int) -> None:
        for _ in range(count):
            worker = _Worker(self, self._next_index)
            self._next_index += 1
            self._workers.append(worker)
            worker.thread.start()

    @property
    def worker_count(self) -> int:
        with self._lock:
            return len([w for w in self._workers if w.thread.is_alive()])

    def scale(self, new_count: int) -> None:
        if new_count < 1:
            raise WorkerPoolError("worker_count must be >= 1")
        with self._lock:
            if not self._started:
                raise WorkerPoolError("pool not started")
            alive = [w for w in self._workers if w.thread.is_alive() and not w.retire.is_set()]
            if new_count > len(alive):
                self._spawn(new_count - len(alive))
            else:
                for worker in alive[new_count:]:
                    worker.retire.set()

    def stop(self, drain: bool = True) -> None:
        """drain=True: finish in-flight handlers then stop. drain=False: stop
        fetching now and leave in-flight deliveries unacked (crash semantics)."""
        if not drain:
            self.runtime.abort_event.set()
        self._stop.set()
        with self._lock:
            workers = list(self._workers)
        for worker in workers:
            worker.thread.join()
        with self._lock:
            self._workers.clear()

    def _run_worker(self, worker: _Worker) -> None:
        idle = self.config.idle_poll_interval
        while not (self._stop.is_set() or worker.retire.is_set()):
            try:
                fetched = self.broker.fetch(worker.consumer_id, self.runtime.all_queues())
            except Exception:
                logger.exception("worker %s fetch failed", worker.consumer_id)
                time.sleep(idle)
                continue
            if fetched is None:
                time.sleep(idle)
                continue
            tag, message = fetched
            if self.runtime.abort_event.is_set():
                break  # leave the delivery unacked for recovery
            try:
                self.runtime.execute_delivery(tag, message)
            except AbandonedDelivery:
                break
            except Exception:
                # Infrastructure failure outside any handler: requeue so the
                # message is retried rather than lost.
                logger.exception("delivery of %s failed outside the handler",
                                 message.message_id)
                try:
                    self.broker.requeue(tag)
                except Exception:
                    logger.exception("could not requeue %s", message.message_id)
        logger.debug("worker %s exits", worker.consumer_id)
