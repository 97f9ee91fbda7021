/** DOM views: incident list with a create form, and the incident detail page
 * with the live task graph, statistics, data-push form and cancel control. */

import { formatDuration, renderTaskGraphSvg } from "./graph.js";
import type {
  IncidentDetail,
  IncidentSummary,
  StageStats,
  WorkflowInfo,
} from "./types.js";
import { TERMINAL_STATUSES } from "./types.js";

export interface Notice {
  kind: "info" | "error";
  text: string;
}

export interface ListCallbacks {
  onOpen(incidentId: string): void;
  onCreate(kind: string, label: string, payloadJson: string): void;
}

export interface DetailCallbacks {
  onBack(): void;
  onCancel(incidentId: string): void;
  onPush(ediPath: string, body: string): void;
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [key, value] of Object.entries(attrs)) node.setAttribute(key, value);
  if (text !== undefined) node.textContent = text;
  return node;
}

export function statusBadge(status: string): HTMLElement {
  return el("span", { class: `badge badge-${status.toLowerCase()}`, "data-status": status }, status);
}

function noticeBanner(notice: Notice): HTMLElement {
  return el("div", { class: `banner banner-${notice.kind}` }, notice.text);
}

export function renderIncidentList(
  container: HTMLElement,
  incidents: IncidentSummary[],
  workflows: WorkflowInfo[],
  callbacks: ListCallbacks,
  notice: Notice | null = null,
): void {
  container.replaceChildren();
  container.appendChild(el("h1", {}, "Incidents"));
  if (notice) container.appendChild(noticeBanner(notice));

  const table = el("table", { class: "incident-list" });
  const head = el("tr");
  for (const title of ["Label", "Workflow", "Status", "Outstanding", ""]) {
    head.appendChild(el("th", {}, title));
  }
  table.appendChild(head);
  for (const incident of incidents) {
    const row = el("tr", { class: "incident-row", "data-incident-id": incident.incident_id });
    row.appendChild(el("td", {}, incident.label));
    row.appendChild(el("td", {}, incident.workflow_kind));
    const statusCell = el("td");
    statusCell.appendChild(statusBadge(incident.status));
    row.appendChild(statusCell);
    row.appendChild(el("td", {}, String(incident.outstanding_messages)));
    const openCell = el("td");
    const openButton = el("button", { class: "open", type: "button" }, "open");
    openButton.addEventListener("click", () => callbacks.onOpen(incident.incident_id));
    openCell.appendChild(openButton);
    row.appendChild(openCell);
    table.appendChild(row);
  }
  container.appendChild(table);
  if (!incidents.length) {
    container.appendChild(el("p", { class: "empty" }, "No incidents yet."));
  }

  const form = el("form", { class: "create-form" });
  form.appendChild(el("h2", {}, "New incident"));
  const kindSelect = el("select", { name: "kind" });
  for (const workflow of workflows) {
    kindSelect.appendChild(el("option", { value: workflow.kind }, workflow.kind));
  }
  const labelInput = el("input", { name: "label", placeholder: "label" });
  const payloadInput = el("textarea", { name: "payload", rows: "3" }, "{}");
  const submit = el("button", { type: "submit" }, "Create");
  form.append(kindSelect, labelInput, payloadInput, submit);
  form.addEventListener("submit", (event) => {
    event.preventDefault();
    callbacks.onCreate(kindSelect.value, labelInput.value, payloadInput.value);
  });
  container.appendChild(form);
}

function statsTable(statistics: Record<string, StageStats>): HTMLElement {
  const table = el("table", { class: "stage-stats" });
  const head = el("tr");
  for (const title of ["Stage", "Count", "Mean wait", "Mean processing", "Max processing"]) {
    head.appendChild(el("th", {}, title));
  }
  table.appendChild(head);
  for (const queue of Object.keys(statistics).sort()) {
    const s = statistics[queue];
    const row = el("tr", { "data-stats-queue": queue });
    row.appendChild(el("td", {}, queue));
    row.appendChild(el("td", {}, String(s.count)));
    row.appendChild(el("td", {}, formatDuration(s.mean_wait)));
    row.appendChild(el("td", {}, formatDuration(s.mean_processing)));
    row.appendChild(el("td", {}, formatDuration(s.max_processing)));
    table.appendChild(row);
  }
  return table;
}

export function renderIncidentDetail(
  container: HTMLElement,
  detail: IncidentDetail,
  callbacks: DetailCallbacks,
  notice: Notice | null = null,
): void {
  const { incident } = detail;
  const terminal = TERMINAL_STATUSES.has(incident.status);
  container.replaceChildren();

  const back = el("button", { class: "back", type: "button" }, "← incidents");
  back.addEventListener("click", () => callbacks.onBack());
  container.appendChild(back);

  const header = el("div", { class: "detail-header" });
  header.appendChild(el("h1", {}, incident.label));
  header.appendChild(statusBadge(incident.status));
  header.appendChild(el("span", { class: "kind" }, incident.workflow_kind));
  const cancel = el("button", { class: "cancel", type: "button" }, "Cancel incident");
  if (terminal) cancel.setAttribute("disabled", "disabled");
  cancel.addEventListener("click", () => callbacks.onCancel(incident.incident_id));
  header.appendChild(cancel);
  container.appendChild(header);

  if (notice) container.appendChild(noticeBanner(notice));

  const graphPane = el("div", { class: "graph-pane" });
  graphPane.innerHTML = renderTaskGraphSvg(detail.task_graph);
  container.appendChild(graphPane);

  container.appendChild(el("h2", {}, "Stage performance"));
  container.appendChild(statsTable(detail.statistics));

  container.appendChild(el("h2", {}, "Push data"));
  const pushEndpoints = detail.endpoints.filter((e) => e.kind === "PUSH" && e.active);
  const form = el("form", { class: "push-form" });
  if (!pushEndpoints.length) {
    container.appendChild(el("p", { class: "empty" }, "No active push endpoints."));
  } else {
    const pathSelect = el("select", { name: "endpoint" });
    for (const endpoint of pushEndpoints) {
      pathSelect.appendChild(
        el("option", { value: endpoint.path }, `/${endpoint.path} → ${endpoint.target_queue}`),
      );
    }
    const body = el("textarea", { name: "body", rows: "3" }, "{}");
    const submit = el("button", { type: "submit" }, "Push");
    if (terminal) {
      pathSelect.setAttribute("disabled", "disabled");
      body.setAttribute("disabled", "disabled");
      submit.setAttribute("disabled", "disabled");
    }
    form.append(pathSelect, body, submit);
    form.addEventListener("submit", (event) => {
      event.preventDefault();
      callbacks.onPush(pathSelect.value, body.value);
    });
    container.appendChild(form);
  }
}

export function renderNotFound(container: HTMLElement, incidentId: string,
                               onBack: () => void): void {
  container.replaceChildren();
  container.appendChild(el("h1", {}, "Not found"));
  container.appendChild(el("p", {}, `No incident ${incidentId}.`));
  const back = el("button", { class: "back", type: "button" }, "← incidents");
  back.addEventListener("click", onBack);
  container.appendChild(back);
}
