"""Simulated execution environment: a data catalog with movement between
machines, and a mock job scheduler with completion callbacks and long-running
data-push jobs.

Timing runs against a pluggable clock: WallClock for demos, ManualClock for
deterministic tests (identical submission sequences produce identical message
sequences when ids come from an injected factory).
"""

from __future__ import annotations

import heapq
import itertools
import json
import logging
import random
import threading
import time
import uuid
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Optional

logger = logging.getLogger(__name__)

DEFAULT_TRANSFER_RATE = 10 * 1024 * 1024  # simulated bytes/second for moves

LOCAL_STORE = "local"


class SimEnvError(Exception):
    pass


class UnknownLocation(SimEnvError):
    pass


class UnknownDataItem(SimEnvError):
    pass


class UnknownJob(SimEnvError):
    pass


class StagingError(SimEnvError):
    """Inputs must be moved onto the target machine before a job may use them."""


class JobStateError(SimEnvError):
    pass


# -- clock -----------------------------------------------------------------


class WallClock:
    """Real-time event scheduler backed by a single timer thread."""

    def __init__(self):
        self._heap: list[tuple[float, int, Callable[[], None]]] = []
        self._seq = itertools.count()
        self._cond = threading.Condition()
        self._stopped = False
        self._thread = threading.Thread(target=self._loop, name="sim-clock", daemon=True)
        self._thread.start()

    def now(self) -> float:
        return time.monotonic()

    def sleep(self, duration: float) -> None:
        if duration > 0:
            time.sleep(duration)

    def schedule(self, delay: float, fn: Callable[[], None]) -> None:
        with self._cond:
            if self._stopped:
                return
            heapq.heappush(self._heap, (self.now() + max(delay, 0.0), next(self._seq), fn))
            self._cond.notify()

    def close(self) -> None:
        with self._cond:
            self._stopped = True
            self._heap.clear()
            self._cond.notify()
        self._thread.join()

    def _loop(self) -> None:
        while True:
            with self._cond:
                if self._stopped:
                    return
                if not self._heap:
                    self._cond.wait()
                    continue
                due, _, fn = self._heap[0]
                wait = due - self.now()
                if wait > 0:
                    self._cond.wait(timeout=wait)
                    continue
                heapq.heappop(self._heap)
            try:
                fn()
            except Exception:
                logger.exception("scheduled simulation event failed")


class ManualClock:
    """Virtual-time scheduler for deterministic tests; advance() fires due
    events synchronously in timestamp order."""

    def __init__(self):
        self._now = 0.0
        self._heap: list[tuple[float, int, Callable[[], None]]] = []
        self._seq = itertools.count()
        self._lock = threading.RLock()

    def now(self) -> float:
        with self._lock:
            return self._now

    def sleep(self, duration: float) -> None:
        self.advance(duration)

    def schedule(self, delay: float, fn: Callable[[], None]) -> None:
        with self._lock:
            heapq.heappush(self._heap, (self._now + max(delay, 0.0), next(self._seq), fn))

    def advance(self, duration: float) -> None:
        with self._lock:
            target = self._now + duration
        while True:
            with self._lock:
                if not self._heap or self._heap[0][0] > target:
                    self._now = target
                    return
                due, _, fn = heapq.heappop(self._heap)
                self._now = due
            fn()

    def close(self) -> None:
        pass


# -- data manager ------------------------------------------------------------


@dataclass
class DataItem:
    data_id: str
    name: str
    location: str
    path: str
    size_bytes: int
    origin: str
    registered_timestamp: float


class DataManager:
    """Catalog of data items plus a shared blob store; moving data between
    machines updates the catalog location and costs a simulated transfer delay."""

    def __init__(self, blob_dir: str | Path, machine_names: Iterable[str] = (), *,
                 transfer_rate: float = DEFAULT_TRANSFER_RATE,
                 clock=None,
                 id_factory: Callable[[], str] | None = None):
        self.blob_dir = Path(blob_dir)
        self.blob_dir.mkdir(parents=True, exist_ok=True)
        self.locations = {LOCAL_STORE, *machine_names}
        self.transfer_rate = transfer_rate
        self._clock = clock
        self._id_factory = id_factory or (lambda: uuid.uuid4().hex)
        self._lock = threading.RLock()
        self._items: dict[str, DataItem] = {}
        self._load_catalog()

    def _load_catalog(self) -> None:
        for meta_path in sorted(self.blob_dir.glob("*.json")):
            try:
                doc = json.loads(meta_path.read_text())
                item = DataItem(**doc)
            except (ValueError, TypeError):
                logger.warning("skipping unreadable catalog entry %s", meta_path)
                continue
            self._items[item.data_id] = item
            self.locations.add(item.location)

    def add_location(self, name: str) -> None:
        with self._lock:
            self.locations.add(name)

    def register_data(self, name: str, content: bytes, location: str = LOCAL_STORE,
                      origin: str = "") -> str:
        with self._lock:
            if location not in self.locations:
                raise UnknownLocation(f"unknown location: {location!r}")
            data_id = self._id_factory()
            blob_path = self.blob_dir / f"{data_id}.bin"
            blob_path.write_bytes(content)
            item = DataItem(
                data_id=data_id, name=name, location=location, path=str(blob_path),
                size_bytes=len(content), origin=origin, registered_timestamp=time.time())
            self._write_meta(item)
            self._items[data_id] = item
            return data_id

    def _write_meta(self, item: DataItem) -> None:
        meta = self.blob_dir / f"{item.data_id}.json"
        meta.write_text(json.dumps(item.__dict__))

    def get(self, data_id: str) -> DataItem:
        with self._lock:
            item = self._items.get(data_id)
            if item is None:
                raise UnknownDataItem(f"unknown data item: {data_id!r}")
            return replace(item)

    def find_by_name(self, name: str) -> Optional[DataItem]:
        with self._lock:
            for item in self._items.values():
                if item.name == name:
                    return replace(item)
        return None

    def items(self) -> list[DataItem]:
        with self._lock:
            return [replace(i) for i in self._items.values()]

    def fetch_content(self, data_id: str) -> bytes:
        return Path(self.get(data_id).path).read_bytes()

    def move_data(self, data_id: str, destination: str) -> None:
        """Relocate an item; a no-op when already at the destination. The
        simulated delay is size / transfer_rate."""
        with self._lock:
            if destination not in self.locations:
                raise UnknownLocation(f"unknown location: {destination!r}")
            item = self._items.get(data_id)
            if item is None:
                raise UnknownDataItem(f"unknown data item: {data_id!r}")
            if item.location == destination:
                return
            delay = item.size_bytes / self.transfer_rate if self.transfer_rate else 0.0
        if self._clock is not None:
            self._clock.sleep(delay)
        elif delay > 0:
            time.sleep(delay)
        with self._lock:
            item = self._items[data_id]
            item.location = destination
            self._write_meta(item)


# -- machines and jobs ----------------------------------------------------------


@dataclass(frozen=True)
class Machine:
    name: str
    max_concurrent_jobs: int = 2
    speed_factor: float = 1.0
    failure_probability: float = 0.0

    def __post_init__(self):
        if self.max_concurrent_jobs < 1:
            raise SimEnvError(f"machine {self.name!r} needs max_concurrent_jobs >= 1")
        if self.speed_factor <= 0:
            raise SimEnvError(f"machine {self.name!r} needs a positive speed_factor")


class JobKind(str, Enum):
    BATCH = "BATCH"
    PERSISTENT = "PERSISTENT"


class JobStatus(str, Enum):
    QUEUED = "QUEUED"
    RUNNING = "RUNNING"
    COMPLETED = "COMPLETED"
    FAILED = "FAILED"


@dataclass(frozen=True)
class BatchSpec:
    nominal_runtime: float


@dataclass(frozen=True)
class PersistentSpec:
    emit_interval: float
    emit_count: int


@dataclass
class Job:
    job_id: str
    machine: str
    kind: JobKind
    status: JobStatus
    incident_id: str
    notify_queue: str
    input_data: list[str]
    spec: BatchSpec | PersistentSpec
    outputs: list[str] = field(default_factory=list)
    emitted: int = 0
    submitted_timestamp: float = 0.0
    notify_extra: dict = field(default_factory=dict)
    origin_message_id: str | None = None
    will_fail: bool = False


class JobScheduler:
    """Mock HPC interface: capacity-limited machines run jobs whose lifecycle
    events publish messages back into the workflow."""

    def __init__(self, machines: Iterable[Machine], data: DataManager, runtime, clock, *,
                 rng: random.Random | None = None,
                 id_factory: Callable[[], str] | None = None):
        self.machines = {m.name: m for m in machines}
        self.data = data
        self.runtime = runtime
        self.clock = clock
        self._rng = rng or random.Random()
        self._id_factory = id_factory or (lambda: uuid.uuid4().hex[:12])
        self._lock = threading.RLock()
        self._jobs: dict[str, Job] = {}
        self._waiting: dict[str, list[str]] = {m: [] for m in self.machines}
        self._running: dict[str, int] = {m: 0 for m in self.machines}
        for m in self.machines:
            data.add_location(m)

    # -- submission ------------------------------------------------------------

    def submit_job(self, machine: str, kind: JobKind, inputs: Iterable[str],
                   runtime_spec: BatchSpec | PersistentSpec, incident_id: str,
                   notify_queue: str, *,
                   notify_extra: dict | None = None,
                   origin_message_id: str | None = None) -> str:
        spec_kind = JobKind.BATCH if isinstance(runtime_spec, BatchSpec) else JobKind.PERSISTENT
        if kind is not spec_kind:
            raise SimEnvError(f"runtime_spec {type(runtime_spec).__name__} does not match kind {kind}")
        mach = self.machines.get(machine)
        if mach is None:
            raise UnknownLocation(f"unknown machine: {machine!r}")
        inputs = list(inputs)
        for data_id in inputs:
            location = self.data.get(data_id).location
            if location != machine:
                raise StagingError(
                    f"input {data_id} is on {location!r}, not {machine!r}; move_data it first")
        job = Job(
            job_id=f"job-{self._id_factory()}",
            machine=machine, kind=kind, status=JobStatus.QUEUED,
            incident_id=incident_id, notify_queue=notify_queue,
            input_data=inputs, spec=runtime_spec,
            submitted_timestamp=time.time(),
            notify_extra=dict(notify_extra or {}),
            origin_message_id=origin_message_id,
            will_fail=self._rng.random() < mach.failure_probability,
        )
        with self._lock:
            self._jobs[job.job_id] = job
            if self._running[machine] < mach.max_concurrent_jobs:
                self._start(job)
            else:
                self._waiting[machine].append(job.job_id)
        logger.info("submitted %s %s on %s -> %s", kind.value, job.job_id, machine, notify_queue)
        return job.job_id

    def _start(self, job: Job) -> None:
        # caller holds the lock
        mach = self.machines[job.machine]
        self._running[job.machine] += 1
        job.status = JobStatus.RUNNING
        if isinstance(job.spec, BatchSpec):
            self.clock.schedule(job.spec.nominal_runtime / mach.speed_factor,
                                lambda: self._finish_batch(job.job_id))
        else:
            self.clock.schedule(job.spec.emit_interval / mach.speed_factor,
                                lambda: self._emit(job.job_id))

    def _release(self, machine: str) -> None:
        # caller holds the lock
        self._running[machine] -= 1
        waiting = self._waiting[machine]
        cap = self.machines[machine].max_concurrent_jobs
        while waiting and self._running[machine] < cap:
            self._start(self._jobs[waiting.pop(0)])

    # -- lifecycle events ----------------------------------------------------------

    def _finish_batch(self, job_id: str) -> None:
        with self._lock:
            job = self._jobs[job_id]
            if job.status is not JobStatus.RUNNING:
                return
            if job.will_fail:
                job.status = JobStatus.FAILED
                payload = {"job_id": job_id, "event": "completed", "status": JobStatus.FAILED.value}
            else:
                output = self._register_output(job)
                job.status = JobStatus.COMPLETED
                payload = {"job_id": job_id, "event": "completed",
                           "status": JobStatus.COMPLETED.value,
                           "output": output, "inputs": list(job.input_data)}
            self._release(job.machine)
        self._notify(job, payload)

    def _emit(self, job_id: str) -> None:
        with self._lock:
            job = self._jobs[job_id]
            if job.status is not JobStatus.RUNNING:
                return
            mach = self.machines[job.machine]
            spec = job.spec
            assert isinstance(spec, PersistentSpec)
            if job.will_fail:
                job.status = JobStatus.FAILED
                self._release(job.machine)
                payload = {"job_id": job_id, "event": "completed", "status": JobStatus.FAILED.value}
            else:
                output = self._register_output(job)
                job.emitted += 1
                payload = {"job_id": job_id, "event": "output", "output": output,
                           "inputs": list(job.input_data), "sequence": job.emitted}
                if job.emitted < spec.emit_count:
                    self.clock.schedule(spec.emit_interval / mach.speed_factor,
                                        lambda: self._emit(job_id))
                else:
                    self.clock.schedule(spec.emit_interval / mach.speed_factor,
                                        lambda: self._complete_persistent(job_id))
        self._notify(job, payload)

    def _complete_persistent(self, job_id: str) -> None:
        with self._lock:
            job = self._jobs[job_id]
            if job.status is not JobStatus.RUNNING:
                return
            job.status = JobStatus.COMPLETED
            self._release(job.machine)
        self._notify(job, {"job_id": job_id, "event": "completed",
                           "status": JobStatus.COMPLETED.value})

    def _register_output(self, job: Job) -> str:
        # caller holds the lock
        content = json.dumps({
            "job_id": job.job_id, "sequence": job.emitted + 1,
            "inputs": list(job.input_data),
        }).encode("utf-8")
        output = self.data.register_data(
            name=f"{job.job_id}-out-{job.emitted + 1}", content=content,
            location=job.machine, origin=f"job:{job.job_id}")
        job.outputs.append(output)
        return output

    def _notify(self, job: Job, payload: dict) -> None:
        doc = {**payload, **job.notify_extra}
        try:
            self.runtime.inject_external(job.incident_id, job.notify_queue, doc,
                                         parent_message_id=job.origin_message_id)
        except Exception:
            logger.exception("job %s could not notify %s", job.job_id, job.notify_queue)

    # -- queries and updates ---------------------------------------------------------

    def push_data_to_job(self, job_id: str, data_id: str) -> None:
        """Feed new data into a running persistent simulation; later emissions
        record the updated input set."""
        with self._lock:
            job = self._jobs.get(job_id)
            if job is None:
                raise UnknownJob(f"unknown job: {job_id!r}")
            if job.kind is not JobKind.PERSISTENT:
                raise JobStateError(f"job {job_id} is {job.kind.value}; only PERSISTENT jobs take pushes")
            if job.status is not JobStatus.RUNNING:
                raise JobStateError(
                    f"job {job_id} is {job.status.value}; start a new job instead")
            location = self.data.get(data_id).location
            if location != job.machine:
                raise StagingError(
                    f"data {data_id} is on {location!r}, not {job.machine!r}")
            if data_id not in job.input_data:
                job.input_data.append(data_id)

    def job_status(self, job_id: str) -> Job:
        with self._lock:
            job = self._jobs.get(job_id)
            if job is None:
                raise UnknownJob(f"unknown job: {job_id!r}")
            return replace(job, input_data=list(job.input_data), outputs=list(job.outputs),
                           notify_extra=dict(job.notify_extra))

    def jobs(self, incident_id: str | None = None) -> list[Job]:
        with self._lock:
            return [self.job_status(j.job_id) for j in self._jobs.values()
                    if incident_id is None or j.incident_id == incident_id]

    def running_count(self, machine: str) -> int:
        with self._lock:
            return self._running[machine]
