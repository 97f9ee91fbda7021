/** Task-graph layout and SVG rendering.
 *
 * The rendered graph is exactly the API's: one SVG group per task node
 * (carrying its message id, queue, status and duration as data attributes)
 * and one line per parent edge. Nothing is invented client-side.
 */

import type { TaskGraphDoc, TaskNode } from "./types.js";

export const STATUS_COLORS: Record<string, string> = {
  COMPLETED: "#2e7d32",
  PROCESSING: "#1565c0",
  DELIVERED: "#5e92f3",
  SENT: "#757575",
  ERROR: "#c62828",
  DROPPED: "#ef6c00",
};

const NODE_W = 150;
const NODE_H = 44;
const GAP_X = 26;
const GAP_Y = 54;
const MARGIN = 24;

/** Layer = longest path from a root, so children always sit below parents. */
export function computeLayers(graph: TaskGraphDoc): Map<string, number> {
  const parents = new Map<string, string[]>();
  for (const node of graph.nodes) parents.set(node.message_id, []);
  for (const [from, to] of graph.edges) parents.get(to)?.push(from);
  const layers = new Map<string, number>();
  const visiting = new Set<string>();

  const layerOf = (id: string): number => {
    const known = layers.get(id);
    if (known !== undefined) return known;
    if (visiting.has(id)) return 0; // defensive: the API guarantees acyclicity
    visiting.add(id);
    const above = (parents.get(id) ?? []).map(layerOf);
    const layer = above.length ? Math.max(...above) + 1 : 0;
    visiting.delete(id);
    layers.set(id, layer);
    return layer;
  };

  for (const node of graph.nodes) layerOf(node.message_id);
  return layers;
}

export interface Placed {
  node: TaskNode;
  x: number;
  y: number;
}

export interface Layout {
  placed: Placed[];
  width: number;
  height: number;
}

export function layoutGraph(graph: TaskGraphDoc): Layout {
  const layers = computeLayers(graph);
  const rows = new Map<number, TaskNode[]>();
  for (const node of graph.nodes) {
    const layer = layers.get(node.message_id) ?? 0;
    const row = rows.get(layer) ?? [];
    row.push(node);
    rows.set(layer, row);
  }
  const placed: Placed[] = [];
  let widest = 0;
  for (const [layer, row] of rows) {
    row.sort((a, b) => a.sent_timestamp - b.sent_timestamp);
    widest = Math.max(widest, row.length);
    row.forEach((node, i) => {
      placed.push({
        node,
        x: MARGIN + i * (NODE_W + GAP_X),
        y: MARGIN + layer * (NODE_H + GAP_Y),
      });
    });
  }
  const depth = rows.size;
  return {
    placed,
    width: MARGIN * 2 + Math.max(widest, 1) * (NODE_W + GAP_X) - GAP_X,
    height: MARGIN * 2 + Math.max(depth, 1) * (NODE_H + GAP_Y) - GAP_Y,
  };
}

export function formatDuration(seconds: number | null): string {
  if (seconds === null || seconds === undefined) return "–";
  return `${Math.round(seconds * 1000)} ms`;
}

function escapeXml(value: string): string {
  return value
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

export function renderTaskGraphSvg(graph: TaskGraphDoc): string {
  const layout = layoutGraph(graph);
  const byId = new Map(layout.placed.map((p) => [p.node.message_id, p]));
  const parts: string[] = [];
  parts.push(
    `<svg xmlns="http://www.w3.org/2000/svg" class="task-graph" ` +
      `viewBox="0 0 ${layout.width} ${layout.height}" width="${layout.width}" ` +
      `height="${layout.height}">`,
  );
  for (const [from, to] of graph.edges) {
    const a = byId.get(from);
    const b = byId.get(to);
    if (!a || !b) continue;
    parts.push(
      `<line class="task-edge" x1="${a.x + NODE_W / 2}" y1="${a.y + NODE_H}" ` +
        `x2="${b.x + NODE_W / 2}" y2="${b.y}" stroke="#9e9e9e" stroke-width="1.5"/>`,
    );
  }
  for (const { node, x, y } of layout.placed) {
    const color = STATUS_COLORS[node.status] ?? "#616161";
    const duration = formatDuration(node.duration);
    parts.push(
      `<g class="task-node" data-message-id="${node.message_id}" ` +
        `data-queue="${escapeXml(node.queue)}" data-status="${node.status}" ` +
        `data-duration="${duration}">` +
        `<rect x="${x}" y="${y}" width="${NODE_W}" height="${NODE_H}" rx="6" ` +
        `fill="${color}" opacity="0.92"/>` +
        `<text x="${x + NODE_W / 2}" y="${y + 18}" text-anchor="middle" ` +
        `fill="#ffffff" font-size="12">${escapeXml(node.queue)}</text>` +
        `<text x="${x + NODE_W / 2}" y="${y + 34}" text-anchor="middle" ` +
        `fill="#e0e0e0" font-size="11">${duration}</text>` +
        `</g>`,
    );
  }
  parts.push("</svg>");
  return parts.join("");
}
