"""Desk-scale wildfire workflow: branching fire-position acquisition, a
two-step weather chain, terrain extraction, a four-source join into a
persistent simulation job, and two output modes.

All science is mocked as labeled pass-through transforms; the point of the
workflow is the branching/join/update structure, not the physics.
"""

from __future__ import annotations

import http.server
import json
import logging
import threading
from dataclasses import dataclass
from enum import Enum

from .edi import EndpointKind
from .simenv import BatchSpec, JobKind, JobStatus, PersistentSpec
from .wfcore import JoinSpec, StageRegistration, WorkflowDefinition

logger = logging.getLogger(__name__)

WILDFIRE_KIND = "wildfire"

Q_INIT = "wildfire_init"
Q_HOTSPOT = "hotspot_ingest"
Q_MODIS = "modis_extract"
Q_VIIRS = "viirs_extract"
Q_GROUND = "ground_format"
Q_GLOBAL_FORECAST = "global_forecast_fetch"
Q_LOCAL_FORECAST = "local_forecast_job"
Q_TERRAIN = "terrain_extract"
Q_JOIN = "wfa_join"
Q_DISPATCH = "wfa_dispatch"
Q_RESULT = "forecast_result"

BRANCH_QUEUES = {"modis": Q_MODIS, "viirs": Q_VIIRS, "ground": Q_GROUND}

SOURCE_FIRE = "fire_position"
SOURCE_WEATHER = "weather"
SOURCE_TERRAIN = "terrain"
SOURCE_CONFIG = "config"

# Terrain and config survive across join generations; fire position and
# weather must be fresh for the simulation to re-dispatch.
WFA_JOIN_SPEC = JoinSpec(
    required_sources=frozenset({SOURCE_FIRE, SOURCE_WEATHER, SOURCE_TERRAIN, SOURCE_CONFIG}),
    sticky=frozenset({SOURCE_TERRAIN, SOURCE_CONFIG}),
)

GLOBAL_TERRAIN_NAME = "terrain_global"

DEFAULT_SIM = {
    "machine": "sim0",
    "poll_interval": 0.05,   # EDI pull cadence against the forecast source
    "batch_runtime": 0.04,   # local weather downscaling job
    "emit_interval": 0.08,   # persistent fire-simulation forecast cadence
    "emit_count": 3,
}


class ForecastKind(str, Enum):
    PERIMETER = "PERIMETER"
    EXPOSURE_SHED = "EXPOSURE_SHED"


class HotspotSource(str, Enum):
    MODIS = "MODIS"
    VIIRS = "VIIRS"
    GROUND = "GROUND"


@dataclass
class WildfireConfig:
    forecast_kind: ForecastKind = ForecastKind.PERIMETER
    area_of_interest: tuple[float, float, float, float] = (41.2, 2.5, 42.6, 3.4)
    hotspot_source: HotspotSource = HotspotSource.GROUND

    def __post_init__(self):
        min_lat, min_lon, max_lat, max_lon = self.area_of_interest
        if not (min_lat < max_lat and min_lon < max_lon):
            raise ValueError(f"degenerate area of interest: {self.area_of_interest}")

    @classmethod
    def from_payload(cls, doc: dict) -> "WildfireConfig":
        kwargs = {}
        if "forecast_kind" in doc:
            kwargs["forecast_kind"] = ForecastKind(str(doc["forecast_kind"]).upper())
        if "area_of_interest" in doc:
            kwargs["area_of_interest"] = tuple(doc["area_of_interest"])
        if "hotspot_source" in doc:
            kwargs["hotspot_source"] = HotspotSource(str(doc["hotspot_source"]).upper())
        return cls(**kwargs)

    def to_payload(self) -> dict:
        return {
            "forecast_kind": self.forecast_kind.value,
            "area_of_interest": list(self.area_of_interest),
            "hotspot_source": self.hotspot_source.value,
        }


def _setup(ctx) -> dict:
    """Config + sim parameters persisted by the init stage."""
    records = ctx.retrieve_stage_data(Q_INIT)
    if not records:
        raise RuntimeError("incident has no persisted setup; init stage did not run")
    return records[0].payload


# -- stage handlers -----------------------------------------------------------


def wildfire_init(ctx) -> None:
    """Validate the incident config, persist it, open the incident's EDI
    endpoints, and seed the terrain and config join inputs.

    Setup is persisted before the endpoints open so that externally triggered
    stages always find it."""
    config = WildfireConfig.from_payload(ctx.message.get("config", {}))
    sim = {**DEFAULT_SIM, **ctx.message.get("sim", {})}
    ctx.persist_stage_data({"config": config.to_payload(), "sim": sim})
    edi = ctx.services.edi
    edi.register_push_endpoint(ctx.incident_id,
                               f"incident/{ctx.incident_id}/hotspots", Q_HOTSPOT)
    url = ctx.message.get("forecast_source_url")
    if url:
        edi.register_pull_endpoint(ctx.incident_id, url, sim["poll_interval"],
                                   Q_GLOBAL_FORECAST)
    ctx.send_message(Q_TERRAIN, {})
    ctx.send_message(Q_JOIN, {"source": SOURCE_CONFIG,
                              "forecast_kind": config.forecast_kind.value})


def terrain_extract(ctx) -> None:
    setup = _setup(ctx)
    data = ctx.services.data
    base = data.find_by_name(GLOBAL_TERRAIN_NAME)
    if base is None:
        seed = json.dumps({"layers": ["topography", "vegetation", "moisture"]}).encode()
        base_id = data.register_data(GLOBAL_TERRAIN_NAME, seed, origin="static-catalog")
    else:
        base_id = base.data_id
    clip = json.dumps({
        "aoi": setup["config"]["area_of_interest"],
        "derived_from": base_id,
        "format": "wfa-terrain",
    }).encode()
    out = data.register_data(f"terrain-{ctx.incident_id[:8]}", clip, origin=Q_TERRAIN)
    ctx.send_message(Q_JOIN, {"source": SOURCE_TERRAIN, "data_id": out})


def hotspot_ingest(ctx) -> None:
    """Branch on the observation's own source, falling back to the incident
    config; exactly one of the three extraction stages runs per submission."""
    setup = _setup(ctx)
    data_id = ctx.message["data_id"]
    content = ctx.services.data.fetch_content(data_id)
    try:
        body = json.loads(content) if content else {}
    except ValueError:
        body = {}
    source = str(body.get("source") or setup["config"]["hotspot_source"]).lower()
    ctx.send_message(BRANCH_QUEUES[source], {"data_id": data_id})


def _position_formatter(stage: str):
    def handler(ctx) -> None:
        data = ctx.services.data
        formatted = json.dumps({
            "format": "wfa-ignition",
            "via": stage,
            "raw_data_id": ctx.message["data_id"],
        }).encode()
        out = data.register_data(f"fire-position-{ctx.incident_id[:8]}", formatted, origin=stage)
        ctx.send_message(Q_JOIN, {"source": SOURCE_FIRE, "data_id": out, "via": stage})

    handler.__name__ = stage
    return handler


def global_forecast_fetch(ctx) -> None:
    # "Download" the newly advertised global forecast: the stored blob records
    # which source state it came from.
    content = json.dumps({
        "url": ctx.message.get("url"),
        "signature": ctx.message.get("signature"),
        "headers": ctx.message.get("headers", {}),
    }).encode()
    out = ctx.services.data.register_data("global-forecast", content, origin=Q_GLOBAL_FORECAST)
    ctx.send_message(Q_LOCAL_FORECAST, {"data_id": out})


def local_forecast_job(ctx) -> None:
    setup = _setup(ctx)
    sim = setup["sim"]
    machine = sim["machine"]
    data_id = ctx.message["data_id"]
    ctx.services.data.move_data(data_id, machine)
    ctx.services.hpc.submit_job(
        machine, JobKind.BATCH, inputs=[data_id],
        runtime_spec=BatchSpec(nominal_runtime=sim["batch_runtime"]),
        incident_id=ctx.incident_id, notify_queue=Q_JOIN,
        notify_extra={"source": SOURCE_WEATHER},
        origin_message_id=ctx.message_id)


def wfa_join(ctx) -> None:
    if ctx.message.get("status") == JobStatus.FAILED.value:
        raise RuntimeError("upstream weather job failed")
    collected = ctx.join_collect(ctx.message["source"], WFA_JOIN_SPEC)
    if collected is None:
        return
    ctx.send_message(Q_DISPATCH, {"inputs": {
        "fire_position": collected[SOURCE_FIRE].get("data_id"),
        "weather": collected[SOURCE_WEATHER].get("output"),
        "terrain": collected[SOURCE_TERRAIN].get("data_id"),
        "forecast_kind": collected[SOURCE_CONFIG].get("forecast_kind"),
    }})


def wfa_dispatch(ctx) -> None:
    """Start the persistent fire simulation on the first complete input set;
    push fresh data into it on later ones."""
    setup = _setup(ctx)
    sim = setup["sim"]
    machine = sim["machine"]
    hpc = ctx.services.hpc
    data = ctx.services.data
    handles = ctx.message["inputs"]
    previous = [r for r in ctx.retrieve_stage_data() if "job_id" in r.payload]
    active = None
    if previous:
        job = hpc.job_status(previous[-1].payload["job_id"])
        if job.status in (JobStatus.QUEUED, JobStatus.RUNNING):
            active = job
    if active is not None:
        if active.status is not JobStatus.RUNNING:
            raise RuntimeError(f"simulation job {active.job_id} is still queued; cannot update")
        update_handle = handles["weather"]
        if data.get(update_handle).location != machine:
            data.move_data(update_handle, machine)
        hpc.push_data_to_job(active.job_id, update_handle)
        ctx.persist_stage_data({"action": "update", "job_id": active.job_id,
                                "data_id": update_handle})
    else:
        staged = []
        for key in ("fire_position", "weather", "terrain"):
            handle = handles[key]
            if data.get(handle).location != machine:
                data.move_data(handle, machine)
            staged.append(handle)
        job_id = hpc.submit_job(
            machine, JobKind.PERSISTENT, inputs=staged,
            runtime_spec=PersistentSpec(emit_interval=sim["emit_interval"],
                                        emit_count=sim["emit_count"]),
            incident_id=ctx.incident_id, notify_queue=Q_RESULT,
            notify_extra={"forecast_kind": handles["forecast_kind"]},
            origin_message_id=ctx.message_id)
        ctx.persist_stage_data({"action": "start", "job_id": job_id})


def forecast_result(ctx) -> None:
    event = ctx.message.get("event")
    if event == "output":
        data = ctx.services.data
        content = data.fetch_content(ctx.message["output"])
        kind = ctx.message.get("forecast_kind") or "UNKNOWN"
        result = data.register_data(
            f"forecast-{kind}-{ctx.incident_id[:8]}-{ctx.message.get('sequence', 0)}",
            content, origin=Q_RESULT)
        ctx.persist_stage_data({
            "forecast_kind": kind,
            "result_data_id": result,
            "inputs": ctx.message.get("inputs", []),
        })
    elif event == "completed":
        if ctx.message.get("status") == JobStatus.FAILED.value:
            raise RuntimeError("fire simulation job failed")
        ctx.complete_incident()


def build_wildfire_workflow() -> WorkflowDefinition:
    return WorkflowDefinition(
        kind=WILDFIRE_KIND,
        init_queue=Q_INIT,
        stages=[
            StageRegistration(Q_INIT, wildfire_init),
            StageRegistration(Q_HOTSPOT, hotspot_ingest),
            StageRegistration(Q_MODIS, _position_formatter(Q_MODIS)),
            StageRegistration(Q_VIIRS, _position_formatter(Q_VIIRS)),
            StageRegistration(Q_GROUND, _position_formatter(Q_GROUND)),
            StageRegistration(Q_GLOBAL_FORECAST, global_forecast_fetch),
            StageRegistration(Q_LOCAL_FORECAST, local_forecast_job),
            StageRegistration(Q_TERRAIN, terrain_extract),
            StageRegistration(Q_JOIN, wfa_join, critical=True),
            StageRegistration(Q_DISPATCH, wfa_dispatch),
            StageRegistration(Q_RESULT, forecast_result),
        ],
    )


# -- scripted external forecast source ------------------------------------------


class ScriptedForecastSource:
    """Tiny controllable HTTP source standing in for a global-forecast site.

    advance() flips the published metadata (etag / last-modified /
    content-length analogs) so pull-endpoint change detection can be driven
    deterministically.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._version = 0
        self.request_count = 0
        source = self

        class Handler(http.server.BaseHTTPRequestHandler):
            def _respond(self, include_body: bool):
                with source._lock:
                    version = source._version
                    source.request_count += 1
                body = json.dumps({"forecast_version": version}).encode()
                self.send_response(200)
                self.send_header("ETag", f'"forecast-v{version}"')
                self.send_header("Last-Modified", f"version-{version}")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                if include_body:
                    self.wfile.write(body)

            def do_HEAD(self):
                self._respond(include_body=False)

            def do_GET(self):
                self._respond(include_body=True)

            def log_message(self, *args):
                pass

        self._server = http.server.ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        name="forecast-source", daemon=True)

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}/forecast"

    def start(self) -> "ScriptedForecastSource":
        self._thread.start()
        return self

    def advance(self) -> int:
        """Publish a new forecast version; the next poll sees a changed signature."""
        with self._lock:
            self._version += 1
            return self._version

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=2.0)


# -- end-to-end driver ---------------------------------------------------------


class DemoError(Exception):
    pass


def wait_until(predicate, timeout: float, interval: float = 0.005, what: str = "condition"):
    """Poll until predicate() is truthy; raises DemoError on timeout."""
    import time as _time

    deadline = _time.monotonic() + timeout
    while _time.monotonic() < deadline:
        value = predicate()
        if value:
            return value
        _time.sleep(interval)
    raise DemoError(f"timed out after {timeout}s waiting for {what}")


def run_demo(engine, *, hotspot_source: str = "ground",
             forecast_kind: str = "PERIMETER", label: str = "demo incident",
             sim_overrides: dict | None = None, timeout: float = 30.0) -> str:
    """Run one wildfire incident end to end against a scripted forecast source.

    The incident completes itself when the persistent simulation finishes;
    this returns its id once it reaches a terminal status.
    """
    source = ScriptedForecastSource().start()
    try:
        payload = {
            "config": {"forecast_kind": forecast_kind, "hotspot_source": hotspot_source},
            "forecast_source_url": source.url,
            "sim": dict(sim_overrides or {}),
        }
        incident_id = engine.runtime.start_incident(WILDFIRE_KIND, label, payload)
        wait_until(
            lambda: any(e.kind is EndpointKind.PUSH
                        for e in engine.edi.endpoints_for(incident_id)),
            timeout, what="the incident's push endpoint")
        observation = json.dumps({
            "source": hotspot_source.lower(),
            "polygon": [[41.9, 2.8], [41.95, 2.85], [41.9, 2.9]],
        }).encode()
        engine.edi.handle_push(f"incident/{incident_id}/hotspots", observation,
                               {"content-type": "application/json"})
        wait_until(lambda: engine.store.get_incident(incident_id).status.terminal,
                   timeout, what="incident completion")
        return incident_id
    finally:
        source.stop()
