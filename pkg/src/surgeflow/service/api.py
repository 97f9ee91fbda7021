"""Management HTTP/JSON API plus the EDI ingest routes, served by a stdlib
threading server so it embeds cleanly next to the worker pool."""

from __future__ import annotations

import json
import logging
import mimetypes
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from ..broker import PayloadTooLarge
from ..edi import InactiveIncident, PushTooLarge, UnknownEndpoint
from ..statestore import (
    IllegalTransition,
    IncidentStatus,
    StateStoreError,
    UnknownIncident,
)
from ..wfcore import CLEANUP_QUEUE, UnknownWorkflow

logger = logging.getLogger(__name__)

_INCIDENT_RE = re.compile(r"^/api/incidents/([0-9a-f]+)$")
_CANCEL_RE = re.compile(r"^/api/incidents/([0-9a-f]+)/cancel$")
_KIND_STATS_RE = re.compile(r"^/api/workflows/([A-Za-z0-9_.-]+)/stats$")


class ApiServer:
    def __init__(self, engine, port: int = 8080, host: str = "0.0.0.0"):
        self.engine = engine
        handler = _make_handler(engine)
        try:
            self._server = ThreadingHTTPServer((host, port), handler)
        except OSError as exc:
            raise RuntimeError(f"cannot bind API port {port}: {exc}") from exc
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        name="surgeflow-api", daemon=True)

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    def start(self) -> int:
        self._thread.start()
        logger.info("API listening on port %d", self.port)
        return self.port

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=5.0)


def _make_handler(engine):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        # -- plumbing ------------------------------------------------------

        def log_message(self, fmt, *args):
            logger.debug("api: " + fmt, *args)

        def _send(self, code: int, doc: dict | list) -> None:
            body = json.dumps(doc).encode("utf-8")
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(body)

        def _error(self, code: int, message: str) -> None:
            self._send(code, {"error": message})

        def _body(self) -> bytes:
            length = int(self.headers.get("Content-Length") or 0)
            return self.rfile.read(length) if length else b""

        def _json_body(self) -> dict:
            raw = self._body()
            if not raw:
                return {}
            return json.loads(raw)

        # -- routes ---------------------------------------------------------

        def do_OPTIONS(self):
            self.send_response(204)
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")
            self.send_header("Content-Length", "0")
            self.end_headers()

        def do_GET(self):
            try:
                self._route_get()
            except Exception:
                logger.exception("GET %s failed", self.path)
                self._error(500, "internal error")

        def do_POST(self):
            try:
                self._route_post()
            except json.JSONDecodeError:
                self._error(400, "request body is not valid JSON")
            except Exception:
                logger.exception("POST %s failed", self.path)
                self._error(500, "internal error")

        def _route_get(self):
            path = self.path.split("?", 1)[0]
            if path == "/api/incidents":
                self._send(200, [engine.incident_summary(r)
                                 for r in engine.store.list_incidents()])
                return
            m = _INCIDENT_RE.match(path)
            if m:
                try:
                    self._send(200, engine.incident_detail(m.group(1)))
                except UnknownIncident:
                    self._error(404, f"unknown incident: {m.group(1)}")
                return
            if path == "/api/workflows":
                self._send(200, [{
                    "kind": d.kind,
                    "init_queue": d.init_queue,
                    "queues": d.stage_queues(),
                } for d in engine.runtime.workflows()])
                return
            m = _KIND_STATS_RE.match(path)
            if m:
                kind = m.group(1)
                try:
                    engine.runtime.workflow(kind)
                except UnknownWorkflow:
                    self._error(404, f"unknown workflow: {kind}")
                    return
                stats = engine.store.stage_statistics(workflow_kind=kind,
                                                      exclude_queues=(CLEANUP_QUEUE,))
                self._send(200, {q: s.__dict__ for q, s in stats.items()})
                return
            if path == "/" or path.startswith("/dashboard"):
                self._serve_static(path)
                return
            self._error(404, f"no such route: {path}")

        def _route_post(self):
            path = self.path.split("?", 1)[0]
            if path == "/api/incidents":
                doc = self._json_body()
                if not isinstance(doc, dict):
                    self._error(400, "request body must be a JSON object")
                    return
                kind = doc.get("workflow_kind")
                label = doc.get("label", "")
                try:
                    incident_id = engine.runtime.start_incident(
                        kind, label, doc.get("initial_payload") or {})
                except (UnknownWorkflow, StateStoreError, TypeError) as exc:
                    self._error(400, str(exc))
                    return
                self._send(201, {"incident_id": incident_id})
                return
            m = _CANCEL_RE.match(path)
            if m:
                incident_id = m.group(1)
                try:
                    engine.runtime.cancel_incident(incident_id)
                except UnknownIncident:
                    self._error(404, f"unknown incident: {incident_id}")
                    return
                except IllegalTransition:
                    status = engine.store.get_incident(incident_id).status
                    self._error(409, f"incident is {status.value}; cannot cancel")
                    return
                self._send(200, {"incident_id": incident_id,
                                 "status": IncidentStatus.CANCELLED.value})
                return
            if path.startswith("/edi/"):
                self._handle_edi_push(path[len("/edi/"):])
                return
            self._error(404, f"no such route: {path}")

        def _handle_edi_push(self, edi_path: str):
            body = self._body()
            metadata = {k.lower(): v for k, v in self.headers.items()
                        if k.lower() not in ("content-length", "host")}
            try:
                message_id = engine.edi.handle_push(edi_path, body, metadata)
            except UnknownEndpoint:
                self._error(404, f"no active push endpoint at /{edi_path}")
                return
            except InactiveIncident as exc:
                self._error(409, str(exc))
                return
            except (PushTooLarge, PayloadTooLarge) as exc:
                self._error(413, str(exc))
                return
            self._send(202, {"message_id": message_id})

        def _serve_static(self, path: str):
            root = engine.config.dashboard_dir
            if root is None:
                self._send(200, {"service": "surgeflow", "api": "/api/incidents"})
                return
            root = Path(root).resolve()
            rel = path[len("/dashboard"):].lstrip("/") if path.startswith("/dashboard") else ""
            target = (root / (rel or "index.html")).resolve()
            if root not in target.parents and target != root:
                self._error(404, "not found")
                return
            if target.is_dir():
                target = target / "index.html"
            if not target.is_file():
                self._error(404, "not found")
                return
            content = target.read_bytes()
            ctype = mimetypes.guess_type(str(target))[0] or "application/octet-stream"
            self.send_response(200)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(content)))
            self.end_headers()
            self.wfile.write(content)

    return Handler
