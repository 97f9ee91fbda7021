/** Typed client for the engine's management API and EDI ingest routes.
 * The dashboard mutates engine state only through these endpoints. */

import type {
  IncidentDetail,
  IncidentSummary,
  StageStats,
  WorkflowInfo,
} from "./types.js";

export class ApiError extends Error {
  constructor(public readonly status: number, message: string) {
    super(message);
    this.name = "ApiError";
  }
}

export class ApiClient {
  constructor(private readonly baseUrl: string = "") {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await fetch(this.baseUrl + path, init);
    if (!response.ok) {
      let message = `${response.status} ${response.statusText}`;
      try {
        const doc = await response.json();
        if (doc && typeof doc.error === "string") message = doc.error;
      } catch {
        // non-JSON error body: keep the status line
      }
      throw new ApiError(response.status, message);
    }
    return (await response.json()) as T;
  }

  listIncidents(): Promise<IncidentSummary[]> {
    return this.request("/api/incidents");
  }

  incidentDetail(incidentId: string): Promise<IncidentDetail> {
    return this.request(`/api/incidents/${incidentId}`);
  }

  createIncident(
    workflowKind: string,
    label: string,
    initialPayload: unknown = {},
  ): Promise<{ incident_id: string }> {
    return this.request("/api/incidents", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({
        workflow_kind: workflowKind,
        label,
        initial_payload: initialPayload,
      }),
    });
  }

  cancelIncident(incidentId: string): Promise<{ incident_id: string; status: string }> {
    return this.request(`/api/incidents/${incidentId}/cancel`, { method: "POST" });
  }

  /** POST raw data to an incident's EDI push endpoint. */
  pushData(
    ediPath: string,
    body: string,
    contentType = "application/json",
  ): Promise<{ message_id: string }> {
    return this.request(`/edi/${ediPath}`, {
      method: "POST",
      headers: { "Content-Type": contentType },
      body,
    });
  }

  workflows(): Promise<WorkflowInfo[]> {
    return this.request("/api/workflows");
  }

  workflowStats(kind: string): Promise<Record<string, StageStats>> {
    return this.request(`/api/workflows/${kind}/stats`);
  }
}
