import type { IncidentDetail, IncidentSummary, TaskGraphDoc } from "../src/types.js";

export function incident(overrides: Partial<IncidentSummary> = {}): IncidentSummary {
  return {
    incident_id: "abc123",
    workflow_kind: "wildfire",
    label: "La Jonquera",
    status: "ACTIVE",
    created_timestamp: 1000.0,
    status_changed_timestamp: 1000.5,
    outstanding_messages: 2,
    cleared_timestamp: null,
    ...overrides,
  };
}

export function sampleGraph(): TaskGraphDoc {
  return {
    incident_id: "abc123",
    nodes: [
      {
        message_id: "m-init", queue: "wildfire_init", status: "COMPLETED",
        sent_timestamp: 1.0, delivered_timestamp: 1.01, completed_timestamp: 1.015,
        duration: 0.005,
      },
      {
        message_id: "m-terrain", queue: "terrain_extract", status: "COMPLETED",
        sent_timestamp: 1.02, delivered_timestamp: 1.03, completed_timestamp: 1.042,
        duration: 0.012,
      },
      {
        message_id: "m-join", queue: "wfa_join", status: "PROCESSING",
        sent_timestamp: 1.05, delivered_timestamp: 1.06, completed_timestamp: null,
        duration: null,
      },
      {
        message_id: "m-push", queue: "hotspot_ingest", status: "SENT",
        sent_timestamp: 1.07, delivered_timestamp: null, completed_timestamp: null,
        duration: null,
      },
    ],
    edges: [
      ["m-init", "m-terrain"],
      ["m-terrain", "m-join"],
    ],
  };
}

export function sampleDetail(overrides: Partial<IncidentDetail> = {}): IncidentDetail {
  return {
    incident: incident(),
    task_graph: sampleGraph(),
    statistics: {
      wildfire_init: {
        queue: "wildfire_init", count: 1, mean_wait: 0.01, max_wait: 0.01,
        mean_processing: 0.005, max_processing: 0.005,
      },
    },
    endpoints: [
      {
        endpoint_id: "ep1", kind: "PUSH", path: "incident/abc123/hotspots",
        target_queue: "hotspot_ingest", poll_interval: null, active: true,
      },
      {
        endpoint_id: "ep2", kind: "PULL", path: "http://example/fc",
        target_queue: "global_forecast_fetch", poll_interval: 0.05, active: true,
      },
    ],
    ...overrides,
  };
}
