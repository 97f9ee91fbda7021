"""Workflow runtime: handler registration, the task execution wrapper, deferred
outbox sends, critical-stage locking, multi-input joins, and incident cleanup.

A stage is a named queue bound to a handler. Handlers receive a HandlerContext,
queue follow-up messages on its outbox (flushed to the broker only after the
handler exits cleanly), persist per-stage data, and collect multi-input joins.
A handler exception freezes its incident: the incident goes ERROR and every
later message of that incident is dropped undelivered-to-handler.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from typing import Any, Callable, Optional

from .broker import Broker, DeliveryTag, Message, payload_size
from .statestore import (
    IllegalTransition,
    IncidentStatus,
    MessageStatus,
    PersistedStageRecord,
    StateStore,
)

logger = logging.getLogger(__name__)

# Reserved internal queue for per-incident cleanup messages. Cleanup messages
# are excluded from the outstanding counter and self-requeue until every other
# message of their incident has resolved.
CLEANUP_QUEUE = "_cleanup"


class WorkflowError(Exception):
    """Base class for runtime failures."""


class DuplicateWorkflow(WorkflowError):
    pass


class UnknownWorkflow(WorkflowError):
    pass


class InvalidDefinition(WorkflowError):
    pass


class UnknownTargetQueue(WorkflowError):
    pass


class JoinProtocolError(WorkflowError):
    pass


class AbandonedDelivery(Exception):
    """Raised at the commit barrier when the pool is hard-stopping; the worker
    must leave the delivery unacked so recovery redelivers it."""


@dataclass(frozen=True)
class StageRegistration:
    """Binding of a queue name to a handler. Critical stages never run
    concurrently for the same (incident, queue); joins must be critical."""

    queue: str
    handler: Callable[["HandlerContext"], None]
    critical: bool = False


@dataclass(frozen=True)
class JoinSpec:
    """What a multi-input stage waits for.

    required_sources: tags that must all be present for the join to fire.
    sticky: tags whose last value carries over into later generations instead
    of needing a fresh record per firing.
    """

    required_sources: frozenset[str]
    sticky: frozenset[str] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "required_sources", frozenset(self.required_sources))
        object.__setattr__(self, "sticky", frozenset(self.sticky))
        if not self.required_sources:
            raise ValueError("a join needs at least one required source")
        if not self.sticky <= self.required_sources:
            raise ValueError("sticky tags must be a subset of required_sources")


@dataclass
class WorkflowDefinition:
    kind: str
    stages: list[StageRegistration]
    init_queue: str
    on_init: Callable[["WorkflowRuntime", str, dict], None] | None = None

    def stage_queues(self) -> list[str]:
        return [s.queue for s in self.stages]


@dataclass
class ServiceBundle:
    """External services handlers may call (wired up by the engine)."""

    data: Any = None
    hpc: Any = None
    edi: Any = None


class HandlerContext:
    """Per-task view handed to a handler: the delivered payload, an outbox of
    deferred sends, and the persistence/join/lifecycle API surface."""

    def __init__(self, runtime: "WorkflowRuntime", workflow_kind: str,
                 registration: StageRegistration, message: Message, consumer_id: str):
        self._runtime = runtime
        self._registration = registration
        self.workflow_kind = workflow_kind
        self.incident_id = message.incident_id
        self.queue = message.queue
        self.message_id = message.message_id
        self.message = message.payload
        self.consumer_id = consumer_id
        self.outbox: list[tuple[str, dict]] = []
        self.logger = logging.getLogger(f"surgeflow.handler.{self.queue}")

    @property
    def services(self) -> ServiceBundle:
        return self._runtime.services

    def send_message(self, target_queue: str, payload: dict) -> None:
        """Queue a message for the broker; it is published only after this
        handler exits cleanly."""
        defn = self._runtime.workflow(self.workflow_kind)
        if target_queue not in defn.stage_queues():
            raise UnknownTargetQueue(
                f"{target_queue!r} is not a stage of workflow {self.workflow_kind!r}")
        size = payload_size(payload)
        if size > self._runtime.broker.payload_cap:
            raise WorkflowError(
                f"outbox payload for {target_queue!r} is {size} bytes; use a data handle")
        self.outbox.append((target_queue, payload))

    def persist_stage_data(self, payload: dict) -> int:
        return self._runtime.store.persist_stage_data(self.incident_id, self.queue, payload)

    def retrieve_stage_data(self, queue: str | None = None) -> list[PersistedStageRecord]:
        return self._runtime.store.retrieve_stage_data(self.incident_id, queue or self.queue)

    def join_collect(self, source_tag: str, join_spec: JoinSpec) -> Optional[dict]:
        """Store this task's input and fire the join if the required set is complete."""
        return self._runtime._join_collect(self, source_tag, join_spec)

    def complete_incident(self) -> None:
        self._runtime.complete_incident(self.incident_id)

    def cancel_incident(self) -> None:
        self._runtime.cancel_incident(self.incident_id)


class WorkflowRuntime:
    """Executes stage handlers against the broker and statestore.

    All shared state lives in the broker and statestore, so execute_delivery
    may run concurrently on any number of workers.
    """

    def __init__(self, broker: Broker, store: StateStore,
                 services: ServiceBundle | None = None):
        self.broker = broker
        self.store = store
        self.services = services or ServiceBundle()
        self._definitions: dict[str, WorkflowDefinition] = {}
        self._stages: dict[str, tuple[str, StageRegistration]] = {}
        # Set while the pool hard-stops: deliveries abandon at the commit
        # barrier instead of acking, simulating a crash for recovery.
        self.abort_event = threading.Event()
        broker.declare_queue(CLEANUP_QUEUE)

    # -- registration ---------------------------------------------------------

    def register_workflow(self, definition: WorkflowDefinition) -> None:
        if definition.kind in self._definitions:
            raise DuplicateWorkflow(f"workflow {definition.kind!r} already registered")
        queues = definition.stage_queues()
        if len(set(queues)) != len(queues):
            raise InvalidDefinition(f"workflow {definition.kind!r} registers a queue twice")
        if definition.init_queue not in queues:
            raise InvalidDefinition(
                f"init queue {definition.init_queue!r} is not a stage of {definition.kind!r}")
        clashes = [q for q in queues if q in self._stages or q == CLEANUP_QUEUE]
        if clashes:
            raise InvalidDefinition(f"queues already bound elsewhere: {clashes}")
        for stage in definition.stages:
            self.broker.declare_queue(stage.queue)
        self._definitions[definition.kind] = definition
        for stage in definition.stages:
            self._stages[stage.queue] = (definition.kind, stage)
        self.store.register_workflow_kind(definition.kind)

    def workflow(self, kind: str) -> WorkflowDefinition:
        defn = self._definitions.get(kind)
        if defn is None:
            raise UnknownWorkflow(f"workflow not registered: {kind!r}")
        return defn

    def workflows(self) -> list[WorkflowDefinition]:
        return list(self._definitions.values())

    def all_queues(self) -> list[str]:
        return sorted(self._stages) + [CLEANUP_QUEUE]

    def stage_registration(self, queue: str) -> StageRegistration:
        try:
            return self._stages[queue][1]
        except KeyError:
            raise UnknownTargetQueue(f"no stage bound to queue {queue!r}") from None

    # -- incident lifecycle -----------------------------------------------------

    def start_incident(self, workflow_kind: str, label: str, initial_payload: dict) -> str:
        defn = self.workflow(workflow_kind)
        incident_id = self.store.create_incident(workflow_kind, label)
        self.store.set_incident_status(incident_id, IncidentStatus.ACTIVE)
        if defn.on_init is not None:
            defn.on_init(self, incident_id, initial_payload)
        self._publish(incident_id, defn.init_queue, initial_payload, parent_message_id=None)
        logger.info("started incident %s (%s: %s)", incident_id, workflow_kind, label)
        return incident_id

    def complete_incident(self, incident_id: str) -> None:
        self._finalize(incident_id, IncidentStatus.COMPLETED)

    def cancel_incident(self, incident_id: str) -> None:
        self._finalize(incident_id, IncidentStatus.CANCELLED)

    def _finalize(self, incident_id: str, status: IncidentStatus) -> None:
        self.store.set_incident_status(incident_id, status)
        # Cleanup messages bypass the outstanding counter so they cannot block
        # themselves from seeing it reach zero.
        message = Message.create(CLEANUP_QUEUE, incident_id, {})
        self.store.log_message_event(message.message_id, MessageStatus.SENT,
                                     incident_id=incident_id, queue=CLEANUP_QUEUE)
        self.broker.publish(message)

    def inject_external(self, incident_id: str, queue: str, payload: dict,
                        parent_message_id: str | None = None) -> str:
        """Entry point for messages that originate outside a handler (EDI
        pushes, poll notifications, simulated job events)."""
        if queue not in self._stages:
            raise UnknownTargetQueue(f"no stage bound to queue {queue!r}")
        return self._publish(incident_id, queue, payload, parent_message_id)

    def _publish(self, incident_id: str, queue: str, payload: dict,
                 parent_message_id: str | None) -> str:
        message = Message.create(queue, incident_id, payload, parent_message_id)
        self.store.log_message_event(message.message_id, MessageStatus.SENT,
                                     incident_id=incident_id, queue=queue,
                                     parent_message_id=parent_message_id)
        self.store.adjust_outstanding(incident_id, +1)
        self.broker.publish(message)
        return message.message_id

    # -- task execution -----------------------------------------------------------

    def execute_delivery(self, tag: DeliveryTag, message: Message) -> None:
        """Run the full task wrapper for one delivered message.

        Order of operations (and the error path) is load-bearing: siblings of
        a frozen incident are dropped before any handler code runs, critical
        stages serialize via the statestore lock, and outbox messages reach
        the broker only after a clean handler exit.
        """
        if message.queue == CLEANUP_QUEUE:
            self._execute_cleanup(tag, message)
            return
        store = self.store
        mid = message.message_id
        incident_id = message.incident_id
        store.log_message_event(mid, MessageStatus.DELIVERED, consumer_id=tag.consumer_id)
        incident = store.get_incident(incident_id)
        if incident.status is not IncidentStatus.ACTIVE:
            store.log_message_event(mid, MessageStatus.DROPPED)
            store.adjust_outstanding(incident_id, -1)
            self.broker.ack(tag)
            return
        kind, registration = self._stages[message.queue]
        locked = False
        if registration.critical:
            locked = store.try_acquire_lock(incident_id, message.queue, tag.consumer_id)
            if not locked:
                self.broker.requeue(tag)
                return
        try:
            store.log_message_event(mid, MessageStatus.PROCESSING)
            ctx = HandlerContext(self, kind, registration, message, tag.consumer_id)
            try:
                registration.handler(ctx)
            except Exception:
                logger.exception("handler for %s failed; freezing incident %s",
                                 message.queue, incident_id)
                store.log_message_event(mid, MessageStatus.ERROR)
                self._freeze(incident_id)
                if locked:
                    store.release_lock(incident_id, message.queue)
                    locked = False
                store.adjust_outstanding(incident_id, -1)
                self.broker.ack(tag)
                return
            if self.abort_event.is_set():
                # Crash simulation: the handler's work evaporates. The lock row
                # is deliberately left behind; startup recovery sweeps it.
                locked = False
                raise AbandonedDelivery(mid)
            for target_queue, payload in ctx.outbox:
                self._publish(incident_id, target_queue, payload, parent_message_id=mid)
            store.log_message_event(mid, MessageStatus.COMPLETED)
            store.adjust_outstanding(incident_id, -1)
            if locked:
                store.release_lock(incident_id, message.queue)
                locked = False
            self.broker.ack(tag)
        except AbandonedDelivery:
            raise
        except Exception:
            if locked:
                store.release_lock(incident_id, message.queue)
            raise

    def _freeze(self, incident_id: str) -> None:
        try:
            self.store.set_incident_status(incident_id, IncidentStatus.ERROR)
        except IllegalTransition:
            pass  # already terminal; the freeze is in effect either way

    def _execute_cleanup(self, tag: DeliveryTag, message: Message) -> None:
        """Cleanup protocol: self-requeue until the incident has no outstanding
        messages, then clear stage persistence + locks and drop EDI endpoints.
        Idempotent: a redelivered cleanup message re-clears nothing."""
        store = self.store
        mid = message.message_id
        incident_id = message.incident_id
        store.log_message_event(mid, MessageStatus.DELIVERED, consumer_id=tag.consumer_id)
        if store.outstanding(incident_id) > 0:
            self.broker.requeue(tag)
            return
        store.log_message_event(mid, MessageStatus.PROCESSING)
        store.clear_incident_state(incident_id)
        if self.services.edi is not None:
            self.services.edi.deregister_incident(incident_id)
        store.log_message_event(mid, MessageStatus.COMPLETED)
        self.broker.ack(tag)
        logger.info("incident %s cleaned up", incident_id)

    # -- joins ---------------------------------------------------------------------

    def _join_collect(self, ctx: HandlerContext, source_tag: str,
                      spec: JoinSpec) -> Optional[dict]:
        if not ctx._registration.critical:
            raise JoinProtocolError(
                f"stage {ctx.queue!r} collects a join but is not registered critical")
        store = self.store
        store.persist_stage_data(ctx.incident_id, ctx.queue, {
            "kind": "join_input", "source": source_tag, "payload": dict(ctx.message),
        })
        records = store.retrieve_stage_data(ctx.incident_id, ctx.queue)
        markers = [r for r in records if r.payload.get("kind") == "join_marker"]
        boundary = markers[-1].sequence if markers else 0
        last_consumed = markers[-1].payload["consumed"] if markers else None
        # Latest eligible record per tag: sticky tags carry over across
        # generations, everything else must be newer than the last firing.
        candidates: dict[str, PersistedStageRecord] = {}
        for record in records:
            if record.payload.get("kind") != "join_input":
                continue
            tag = record.payload["source"]
            if tag not in spec.required_sources:
                continue
            if tag in spec.sticky or record.sequence > boundary:
                candidates[tag] = record
        if set(candidates) != set(spec.required_sources):
            return None
        consumed = {tag: record.sequence for tag, record in candidates.items()}
        if consumed == last_consumed:
            return None
        store.persist_stage_data(ctx.incident_id, ctx.queue,
                                 {"kind": "join_marker", "consumed": consumed})
        return {tag: record.payload["payload"] for tag, record in candidates.items()}
