/** Mirrors of the engine's HTTP/JSON API documents. */

export interface IncidentSummary {
  incident_id: string;
  workflow_kind: string;
  label: string;
  status: string;
  created_timestamp: number;
  status_changed_timestamp: number;
  outstanding_messages: number;
  cleared_timestamp: number | null;
}

export interface TaskNode {
  message_id: string;
  queue: string;
  status: string;
  sent_timestamp: number;
  delivered_timestamp: number | null;
  completed_timestamp: number | null;
  duration: number | null;
}

export interface TaskGraphDoc {
  incident_id: string;
  nodes: TaskNode[];
  edges: [string, string][];
}

export interface StageStats {
  queue: string;
  count: number;
  mean_wait: number;
  max_wait: number;
  mean_processing: number;
  max_processing: number;
}

export interface EndpointInfo {
  endpoint_id: string;
  kind: "PUSH" | "PULL";
  path: string;
  target_queue: string;
  poll_interval: number | null;
  active: boolean;
}

export interface IncidentDetail {
  incident: IncidentSummary;
  task_graph: TaskGraphDoc;
  statistics: Record<string, StageStats>;
  endpoints: EndpointInfo[];
}

export interface WorkflowInfo {
  kind: string;
  init_queue: string;
  queues: string[];
}

export const TERMINAL_STATUSES = new Set(["COMPLETED", "CANCELLED", "ERROR"]);
