"""External Data Interface: inbound push endpoints and outbound pull-polling
that convert external data events into workflow messages.

Push bodies are stored through the data manager first; the resulting message
carries only the data handle plus metadata, never the body. Pull endpoints
poll a source's headers and emit one message per observed signature change
(the first observation counts as a change).
"""

from __future__ import annotations

import hashlib
import logging
import threading
import uuid
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable

import requests

from .statestore import IncidentStatus

logger = logging.getLogger(__name__)

DEFAULT_PUSH_BODY_CAP = 8 * 1024 * 1024
DEFAULT_SIGNATURE_HEADERS = ("etag", "last-modified", "content-length")


class EdiError(Exception):
    pass


class UnknownEndpoint(EdiError):
    pass


class DuplicatePath(EdiError):
    pass


class PushTooLarge(EdiError):
    pass


class InactiveIncident(EdiError):
    def __init__(self, incident_id: str, status: IncidentStatus):
        super().__init__(f"incident {incident_id} is {status.value}; push rejected")
        self.incident_id = incident_id
        self.status = status


class EndpointKind(str, Enum):
    PUSH = "PUSH"
    PULL = "PULL"


@dataclass
class Endpoint:
    endpoint_id: str
    incident_id: str
    kind: EndpointKind
    path: str  # URI path for PUSH, source URL for PULL
    target_queue: str
    poll_interval: float | None = None
    last_signature: str | None = None
    active: bool = True
    poll_count: int = 0
    message_count: int = 0
    _stop: threading.Event = field(default_factory=threading.Event, repr=False)


def normalize_path(path: str) -> str:
    return path.strip("/")


class EdiManager:
    """Routes external pushes and polled source changes into the workflow."""

    def __init__(self, runtime, data, *,
                 push_body_cap: int = DEFAULT_PUSH_BODY_CAP,
                 signature_headers: Iterable[str] = DEFAULT_SIGNATURE_HEADERS,
                 http_timeout: float = 3.0):
        self.runtime = runtime
        self.data = data
        self.push_body_cap = push_body_cap
        self.signature_headers = tuple(h.lower() for h in signature_headers)
        self.http_timeout = http_timeout
        self._lock = threading.RLock()
        self._endpoints: dict[str, Endpoint] = {}
        self._push_routes: dict[str, str] = {}  # normalized path -> endpoint_id
        self._threads: dict[str, threading.Thread] = {}

    # -- registration -------------------------------------------------------

    def register_push_endpoint(self, incident_id: str, path: str, target_queue: str) -> str:
        self._require_active_incident(incident_id)
        self.runtime.stage_registration(target_queue)  # raises for unbound queues
        key = normalize_path(path)
        if not key:
            raise EdiError("push endpoint path must be non-empty")
        with self._lock:
            if key in self._push_routes:
                existing = self._endpoints[self._push_routes[key]]
                # Redelivered init tasks re-register their own endpoints;
                # that must stay idempotent rather than freeze the incident.
                if (existing.incident_id == incident_id
                        and existing.target_queue == target_queue):
                    return existing.endpoint_id
                raise DuplicatePath(f"push path already registered: /{key}")
            endpoint = Endpoint(endpoint_id=uuid.uuid4().hex, incident_id=incident_id,
                                kind=EndpointKind.PUSH, path=key, target_queue=target_queue)
            self._endpoints[endpoint.endpoint_id] = endpoint
            self._push_routes[key] = endpoint.endpoint_id
        logger.info("push endpoint /%s -> %s (incident %s)", key, target_queue, incident_id)
        return endpoint.endpoint_id

    def register_pull_endpoint(self, incident_id: str, url: str, poll_interval: float,
                               target_queue: str) -> str:
        self._require_active_incident(incident_id)
        self.runtime.stage_registration(target_queue)
        with self._lock:
            for existing in self._endpoints.values():
                if (existing.active and existing.kind is EndpointKind.PULL
                        and existing.incident_id == incident_id
                        and existing.path == url
                        and existing.target_queue == target_queue):
                    return existing.endpoint_id
        endpoint = Endpoint(endpoint_id=uuid.uuid4().hex, incident_id=incident_id,
                            kind=EndpointKind.PULL, path=url, target_queue=target_queue,
                            poll_interval=poll_interval)
        with self._lock:
            self._endpoints[endpoint.endpoint_id] = endpoint
            thread = threading.Thread(target=self._poll_loop, args=(endpoint,),
                                      name=f"edi-pull-{endpoint.endpoint_id[:8]}", daemon=True)
            self._threads[endpoint.endpoint_id] = thread
        thread.start()
        logger.info("pull endpoint %s -> %s every %.3fs (incident %s)",
                    url, target_queue, poll_interval, incident_id)
        return endpoint.endpoint_id

    def _require_active_incident(self, incident_id: str) -> None:
        incident = self.runtime.store.get_incident(incident_id)
        if incident.status is not IncidentStatus.ACTIVE:
            raise InactiveIncident(incident_id, incident.status)

    # -- inbound pushes --------------------------------------------------------

    def handle_push(self, path: str, body: bytes, content_metadata: dict | None = None) -> str:
        key = normalize_path(path)
        with self._lock:
            endpoint_id = self._push_routes.get(key)
            endpoint = self._endpoints.get(endpoint_id) if endpoint_id else None
        if endpoint is None or not endpoint.active:
            raise UnknownEndpoint(f"no active push endpoint at /{key}")
        incident = self.runtime.store.get_incident(endpoint.incident_id)
        if incident.status is not IncidentStatus.ACTIVE:
            raise InactiveIncident(endpoint.incident_id, incident.status)
        if len(body) > self.push_body_cap:
            raise PushTooLarge(f"push body is {len(body)} bytes; cap is {self.push_body_cap}")
        data_id = self.data.register_data(
            name=f"edi/{key}", content=body, origin=f"edi-push:/{key}")
        message_id = self.runtime.inject_external(endpoint.incident_id, endpoint.target_queue, {
            "data_id": data_id,
            "size_bytes": len(body),
            "metadata": dict(content_metadata or {}),
        })
        with self._lock:
            endpoint.message_count += 1
        return message_id

    # -- outbound polling ---------------------------------------------------------

    def _signature(self, headers: dict[str, str]) -> str:
        digest = hashlib.sha256()
        for name in self.signature_headers:
            digest.update(f"{name}={headers.get(name, '')}\n".encode("utf-8"))
        return digest.hexdigest()

    def _poll_loop(self, endpoint: Endpoint) -> None:
        first = True
        while True:
            if not first and endpoint._stop.wait(endpoint.poll_interval):
                break
            first = False
            if endpoint._stop.is_set() or not endpoint.active:
                break
            try:
                resp = requests.head(endpoint.path, timeout=self.http_timeout,
                                     allow_redirects=True)
                headers = {k.lower(): v for k, v in resp.headers.items()}
            except requests.RequestException as exc:
                logger.warning("pull endpoint %s unreachable: %s", endpoint.path, exc)
                continue
            signature = self._signature(headers)
            with self._lock:
                if not endpoint.active:
                    break
                endpoint.poll_count += 1
                changed = signature != endpoint.last_signature
                if changed:
                    endpoint.last_signature = signature
            if not changed:
                continue
            try:
                self.runtime.inject_external(endpoint.incident_id, endpoint.target_queue, {
                    "url": endpoint.path,
                    "headers": headers,
                    "signature": signature,
                })
                with self._lock:
                    endpoint.message_count += 1
            except Exception:
                logger.exception("pull endpoint %s could not publish", endpoint.path)
        logger.debug("pull endpoint %s poller exits", endpoint.endpoint_id)

    # -- queries and teardown ----------------------------------------------------

    def get_endpoint(self, endpoint_id: str) -> Endpoint:
        with self._lock:
            endpoint = self._endpoints.get(endpoint_id)
            if endpoint is None:
                raise UnknownEndpoint(f"unknown endpoint: {endpoint_id!r}")
            return replace(endpoint)

    def endpoints_for(self, incident_id: str, active_only: bool = True) -> list[Endpoint]:
        with self._lock:
            return [replace(e) for e in self._endpoints.values()
                    if e.incident_id == incident_id and (e.active or not active_only)]

    def deregister_incident(self, incident_id: str) -> int:
        """Deactivate every endpoint of an incident; frees push paths and stops pollers."""
        with self._lock:
            victims = [e for e in self._endpoints.values()
                       if e.incident_id == incident_id and e.active]
            for endpoint in victims:
                self._deactivate(endpoint)
        return len(victims)

    def stop(self) -> None:
        with self._lock:
            for endpoint in self._endpoints.values():
                if endpoint.active:
                    self._deactivate(endpoint)
            threads = list(self._threads.values())
        for thread in threads:
            thread.join(timeout=2.0)

    def _deactivate(self, endpoint: Endpoint) -> None:
        # caller holds the lock
        endpoint.active = False
        endpoint._stop.set()
        if endpoint.kind is EndpointKind.PUSH:
            self._push_routes.pop(endpoint.path, None)
