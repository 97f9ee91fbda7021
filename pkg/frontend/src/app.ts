/** Dashboard shell: hash routing between the incident list and detail views,
 * polling refresh while data can still change, and API-error surfacing. */

import { ApiClient, ApiError } from "./api.js";
import type { Notice } from "./views.js";
import {
  renderIncidentDetail,
  renderIncidentList,
  renderNotFound,
} from "./views.js";
import { TERMINAL_STATUSES } from "./types.js";

const DEFAULT_POLL_MS = 1000;

export class App {
  private notice: Notice | null = null;
  private timer: ReturnType<typeof setInterval> | null = null;

  constructor(
    private readonly root: HTMLElement,
    private readonly client: ApiClient,
    readonly pollIntervalMs: number = DEFAULT_POLL_MS,
  ) {}

  start(): void {
    window.addEventListener("hashchange", () => {
      this.notice = null;
      void this.refresh();
    });
    this.timer = setInterval(() => void this.refresh(), this.pollIntervalMs);
    void this.refresh();
  }

  stop(): void {
    if (this.timer !== null) clearInterval(this.timer);
  }

  private currentIncident(): string | null {
    const match = /^#\/incident\/([0-9a-f]+)$/.exec(window.location.hash);
    return match ? match[1] : null;
  }

  async refresh(): Promise<void> {
    const incidentId = this.currentIncident();
    try {
      if (incidentId) {
        await this.renderDetail(incidentId);
      } else {
        await this.renderList();
      }
    } catch (error) {
      if (error instanceof ApiError && error.status === 404 && incidentId) {
        renderNotFound(this.root, incidentId, () => this.open(null));
        return;
      }
      const text = error instanceof Error ? error.message : String(error);
      this.notice = { kind: "error", text: `API unavailable: ${text} (retrying)` };
      renderIncidentList(this.root, [], [], this.listCallbacks(), this.notice);
    }
  }

  private async renderList(): Promise<void> {
    const [incidents, workflows] = await Promise.all([
      this.client.listIncidents(),
      this.client.workflows(),
    ]);
    renderIncidentList(this.root, incidents, workflows, this.listCallbacks(), this.notice);
  }

  private async renderDetail(incidentId: string): Promise<void> {
    const detail = await this.client.incidentDetail(incidentId);
    renderIncidentDetail(this.root, detail, {
      onBack: () => this.open(null),
      onCancel: (id) => void this.cancel(id),
      onPush: (path, body) => void this.push(path, body),
    }, this.notice);
  }

  private listCallbacks() {
    return {
      onOpen: (incidentId: string) => this.open(incidentId),
      onCreate: (kind: string, label: string, payloadJson: string) =>
        void this.create(kind, label, payloadJson),
    };
  }

  private open(incidentId: string | null): void {
    this.notice = null;
    window.location.hash = incidentId ? `#/incident/${incidentId}` : "#/";
    void this.refresh();
  }

  private async create(kind: string, label: string, payloadJson: string): Promise<void> {
    let payload: unknown = {};
    try {
      payload = payloadJson.trim() ? JSON.parse(payloadJson) : {};
    } catch {
      this.notice = { kind: "error", text: "Initial payload is not valid JSON" };
      void this.refresh();
      return;
    }
    try {
      const created = await this.client.createIncident(kind, label, payload);
      this.open(created.incident_id);
    } catch (error) {
      this.notice = this.errorNotice("create failed", error);
      void this.refresh();
    }
  }

  private async cancel(incidentId: string): Promise<void> {
    try {
      await this.client.cancelIncident(incidentId);
      this.notice = { kind: "info", text: "Incident cancelled" };
    } catch (error) {
      this.notice = this.errorNotice("cancel rejected", error);
    }
    void this.refresh();
  }

  private async push(path: string, body: string): Promise<void> {
    try {
      await this.client.pushData(path, body);
      this.notice = { kind: "info", text: `Pushed to /${path}` };
    } catch (error) {
      this.notice = this.errorNotice("push rejected", error);
    }
    void this.refresh();
  }

  private errorNotice(prefix: string, error: unknown): Notice {
    const text = error instanceof Error ? error.message : String(error);
    return { kind: "error", text: `${prefix}: ${text}` };
  }
}

export { TERMINAL_STATUSES };

const root = typeof document !== "undefined" ? document.getElementById("app") : null;
if (root) {
  const params = new URLSearchParams(window.location.search);
  const poll = Number(params.get("poll") ?? DEFAULT_POLL_MS);
  new App(root, new ApiClient(""), Number.isFinite(poll) && poll > 0 ? poll : DEFAULT_POLL_MS).start();
}
