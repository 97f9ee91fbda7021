"""Engine entry point: configuration, lifecycle (recover -> register ->
workers -> API), and the read models the management API serves."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

from ..broker import DEFAULT_PAYLOAD_CAP, DEFAULT_REQUEUE_DELAY, Broker
from ..edi import DEFAULT_PUSH_BODY_CAP, EdiManager
from ..simenv import (
    DEFAULT_TRANSFER_RATE,
    DataManager,
    JobScheduler,
    Machine,
    WallClock,
)
from ..statestore import IncidentRecord, StateStore
from ..wfcore import CLEANUP_QUEUE, ServiceBundle, WorkflowDefinition, WorkflowRuntime
from ..workers import DEFAULT_IDLE_POLL_INTERVAL, WorkerPool, WorkerPoolConfig

logger = logging.getLogger(__name__)


class ConfigError(Exception):
    pass


def _default_machines() -> list[Machine]:
    return [Machine(name="sim0", max_concurrent_jobs=4, speed_factor=1.0)]


@dataclass
class EngineConfig:
    data_dir: Path = field(
        default_factory=lambda: Path(os.environ.get("SURGEFLOW_DATA_DIR", "./data")))
    workers: int = field(
        default_factory=lambda: int(os.environ.get("SURGEFLOW_WORKERS", "4")))
    port: int = 8080
    payload_cap: int = DEFAULT_PAYLOAD_CAP
    push_body_cap: int = DEFAULT_PUSH_BODY_CAP
    requeue_delay: float = DEFAULT_REQUEUE_DELAY
    idle_poll_interval: float = DEFAULT_IDLE_POLL_INTERVAL
    transfer_rate: float = DEFAULT_TRANSFER_RATE
    machines: list[Machine] = field(default_factory=_default_machines)
    dashboard_dir: Path | None = None
    fsync: bool = False

    def __post_init__(self):
        self.data_dir = Path(self.data_dir)
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if not (0 < self.port < 65536):
            raise ConfigError(f"port must be in 1..65535, got {self.port}")
        if not self.machines:
            raise ConfigError("machines must name at least one machine")
        if self.requeue_delay < 0:
            raise ConfigError(f"requeue_delay must be >= 0, got {self.requeue_delay}")

    def apply_machines_file(self, path: str | Path) -> None:
        """Load the machine roster (and optional transfer rate) from a JSON file."""
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"machines file {path} unreadable: {exc}") from exc
        entries = doc.get("machines")
        if not isinstance(entries, list) or not entries:
            raise ConfigError(f"machines file {path} needs a non-empty 'machines' list")
        roster = []
        for entry in entries:
            try:
                roster.append(Machine(
                    name=entry["name"],
                    max_concurrent_jobs=int(entry.get("max_concurrent_jobs", 2)),
                    speed_factor=float(entry.get("speed_factor", 1.0)),
                    failure_probability=float(entry.get("failure_probability", 0.0)),
                ))
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"machines file {path}: bad entry {entry!r}: {exc}") from exc
        self.machines = roster
        if "transfer_rate_bytes_per_s" in doc:
            self.transfer_rate = float(doc["transfer_rate_bytes_per_s"])


@dataclass
class TaskGraphNode:
    message_id: str
    queue: str
    status: str
    sent_timestamp: float
    delivered_timestamp: float | None
    completed_timestamp: float | None
    duration: float | None

    def to_doc(self) -> dict:
        return dict(self.__dict__)


@dataclass
class TaskGraph:
    """The executed-task graph of one incident: nodes are logged messages,
    edges follow parent links. Cleanup plumbing is excluded."""

    incident_id: str
    nodes: list[TaskGraphNode]
    edges: list[tuple[str, str]]

    def to_doc(self) -> dict:
        return {
            "incident_id": self.incident_id,
            "nodes": [n.to_doc() for n in self.nodes],
            "edges": [list(e) for e in self.edges],
        }

    def queues(self) -> list[str]:
        return [n.queue for n in self.nodes]


class Engine:
    """Composes broker, statestore, runtime, simulated services, workers and
    the HTTP API into one process."""

    def __init__(self, config: EngineConfig, clock=None):
        self.config = config
        config.data_dir.mkdir(parents=True, exist_ok=True)
        self.clock = clock if clock is not None else WallClock()
        self._owns_clock = clock is None
        self.broker = Broker(config.data_dir, payload_cap=config.payload_cap,
                             requeue_delay=config.requeue_delay, fsync=config.fsync)
        self.store = StateStore(config.data_dir / "state.sqlite3")
        self.services = ServiceBundle()
        self.runtime = WorkflowRuntime(self.broker, self.store, self.services)
        self.data = DataManager(config.data_dir / "blobs",
                                [m.name for m in config.machines],
                                transfer_rate=config.transfer_rate, clock=self.clock)
        self.hpc = JobScheduler(config.machines, self.data, self.runtime, self.clock)
        self.edi = EdiManager(self.runtime, self.data, push_body_cap=config.push_body_cap)
        self.services.data = self.data
        self.services.hpc = self.hpc
        self.services.edi = self.edi
        self.pool: WorkerPool | None = None
        self._api = None
        self._stopped = False

    # -- lifecycle ----------------------------------------------------------

    def recover(self) -> int:
        """Restore unacked deliveries and sweep stage locks orphaned by a crash."""
        restored = self.broker.recover()
        swept = self.store.release_all_locks()
        if swept:
            logger.info("swept %d stale stage lock(s)", swept)
        logger.info("%d message(s) recovered", restored)
        return restored

    def register_workflow(self, definition: WorkflowDefinition) -> None:
        self.runtime.register_workflow(definition)

    def start_workers(self, count: int | None = None) -> WorkerPool:
        config = WorkerPoolConfig(worker_count=count or self.config.workers,
                                  idle_poll_interval=self.config.idle_poll_interval)
        self.pool = WorkerPool(self.broker, self.runtime, config).start()
        return self.pool

    def start_api(self, port: int | None = None) -> int:
        from .api import ApiServer

        self._api = ApiServer(self, port=self.config.port if port is None else port)
        return self._api.start()

    @property
    def api_port(self) -> int | None:
        return self._api.port if self._api else None

    def stop(self, drain: bool = True) -> None:
        if self._stopped:
            return
        self._stopped = True
        if self._api is not None:
            self._api.stop()
        if self.pool is not None:
            self.pool.stop(drain=drain)
        self.edi.stop()
        if self._owns_clock:
            self.clock.close()
        self.broker.close()
        self.store.close()

    # -- read models -----------------------------------------------------------

    def incident_summary(self, record: IncidentRecord) -> dict:
        return {
            "incident_id": record.incident_id,
            "workflow_kind": record.workflow_kind,
            "label": record.label,
            "status": record.status.value,
            "created_timestamp": record.created_timestamp,
            "status_changed_timestamp": record.status_changed_timestamp,
            "outstanding_messages": record.outstanding_messages,
            "cleared_timestamp": record.cleared_timestamp,
        }

    def task_graph(self, incident_id: str) -> TaskGraph:
        entries = self.store.messages_for_incident(incident_id,
                                                   exclude_queues=(CLEANUP_QUEUE,))
        nodes = []
        ids = set()
        for e in entries:
            duration = None
            if e.completed_timestamp is not None and e.delivered_timestamp is not None:
                duration = e.completed_timestamp - e.delivered_timestamp
            nodes.append(TaskGraphNode(
                message_id=e.message_id, queue=e.queue, status=e.status.value,
                sent_timestamp=e.sent_timestamp, delivered_timestamp=e.delivered_timestamp,
                completed_timestamp=e.completed_timestamp, duration=duration))
            ids.add(e.message_id)
        edges = [(e.parent_message_id, e.message_id)
                 for e in entries if e.parent_message_id in ids]
        return TaskGraph(incident_id=incident_id, nodes=nodes, edges=edges)

    def incident_detail(self, incident_id: str) -> dict:
        record = self.store.get_incident(incident_id)
        stats = self.store.stage_statistics(incident_id=incident_id,
                                            exclude_queues=(CLEANUP_QUEUE,))
        endpoints = [{
            "endpoint_id": e.endpoint_id,
            "kind": e.kind.value,
            "path": e.path,
            "target_queue": e.target_queue,
            "poll_interval": e.poll_interval,
            "active": e.active,
        } for e in self.edi.endpoints_for(incident_id)]
        return {
            "incident": self.incident_summary(record),
            "task_graph": self.task_graph(incident_id).to_doc(),
            "statistics": {q: s.__dict__ for q, s in stats.items()},
            "endpoints": endpoints,
        }


def serve(config: EngineConfig, *, extra_workflows: list[WorkflowDefinition] | None = None,
          api_port: int | None = None) -> Engine:
    """Bring up a full engine: recover, register workflows, start the pool and
    the HTTP API. Returns the running engine; the caller owns shutdown."""
    from ..demo_wildfire import build_wildfire_workflow

    engine = Engine(config)
    try:
        engine.recover()
        engine.register_workflow(build_wildfire_workflow())
        for defn in extra_workflows or []:
            engine.register_workflow(defn)
        engine.start_workers()
        port = engine.start_api(port=api_port)
        logger.info("engine serving on port %d (data dir %s)", port, config.data_dir)
    except Exception:
        engine.stop()
        raise
    return engine
