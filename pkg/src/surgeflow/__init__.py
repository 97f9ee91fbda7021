"""surgeflow: a data-driven workflow engine for urgent computing.

Workflows are sets of message-triggered stage handlers over durable queues;
branching is decided at runtime by the data that arrives. The engine bundles
a durable broker, a transactional state store, a task-farm worker pool,
external data ingestion, and simulated HPC/data-manager services.
"""

from .broker import Broker, DeliveryTag, Message
from .edi import EdiManager, Endpoint, EndpointKind
from .simenv import (
    BatchSpec,
    DataItem,
    DataManager,
    Job,
    JobKind,
    JobScheduler,
    JobStatus,
    Machine,
    ManualClock,
    PersistentSpec,
    WallClock,
)
from .statestore import (
    IncidentRecord,
    IncidentStatus,
    MessageLogEntry,
    MessageStatus,
    PersistedStageRecord,
    StageStats,
    StateStore,
)
from .wfcore import (
    CLEANUP_QUEUE,
    HandlerContext,
    JoinSpec,
    ServiceBundle,
    StageRegistration,
    WorkflowDefinition,
    WorkflowRuntime,
)
from .workers import WorkerPool, WorkerPoolConfig

__version__ = "0.1.0"

__all__ = [
    "Broker", "DeliveryTag", "Message",
    "EdiManager", "Endpoint", "EndpointKind",
    "BatchSpec", "DataItem", "DataManager", "Job", "JobKind", "JobScheduler",
    "JobStatus", "Machine", "ManualClock", "PersistentSpec", "WallClock",
    "IncidentRecord", "IncidentStatus", "MessageLogEntry", "MessageStatus",
    "PersistedStageRecord", "StageStats", "StateStore",
    "CLEANUP_QUEUE", "HandlerContext", "JoinSpec", "ServiceBundle",
    "StageRegistration", "WorkflowDefinition", "WorkflowRuntime",
    "WorkerPool", "WorkerPoolConfig",
]
