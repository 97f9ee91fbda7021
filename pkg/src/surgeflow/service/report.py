"""Report rendering: task-graph and stage-statistics figures written to files
alongside CSV output, for the demo and stats CLI paths."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import networkx as nx

from ..statestore import StageStats
from .engine import TaskGraph

STATUS_COLORS = {
    "COMPLETED": "#4caf50",
    "PROCESSING": "#2196f3",
    "DELIVERED": "#90caf9",
    "SENT": "#bdbdbd",
    "ERROR": "#f44336",
    "DROPPED": "#ff9800",
}


def write_stage_stats_csv(stats: dict[str, StageStats], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["queue", "count", "mean_wait_s", "max_wait_s",
                         "mean_processing_s", "max_processing_s"])
        for queue in sorted(stats):
            s = stats[queue]
            writer.writerow([s.queue, s.count, f"{s.mean_wait:.6f}", f"{s.max_wait:.6f}",
                             f"{s.mean_processing:.6f}", f"{s.max_processing:.6f}"])
    return path


def render_stage_stats(stats: dict[str, StageStats], path: str | Path,
                       title: str = "Stage performance") -> Path:
    path = Path(path)
    queues = sorted(stats)
    waits = [stats[q].mean_wait * 1000 for q in queues]
    procs = [stats[q].mean_processing * 1000 for q in queues]
    positions = range(len(queues))
    fig, ax = plt.subplots(figsize=(max(6, len(queues) * 0.9), 4))
    ax.bar([p - 0.2 for p in positions], waits, width=0.4, label="mean queue wait")
    ax.bar([p + 0.2 for p in positions], procs, width=0.4, label="mean processing")
    ax.set_xticks(list(positions))
    ax.set_xticklabels(queues, rotation=45, ha="right")
    ax.set_ylabel("milliseconds")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _layered_positions(graph: TaskGraph) -> dict[str, tuple[float, float]]:
    g = nx.DiGraph()
    for node in graph.nodes:
        g.add_node(node.message_id)
    g.add_edges_from(graph.edges)
    # Layer = longest path from a root; roots are externally triggered tasks.
    layer: dict[str, int] = {}
    for node_id in nx.topological_sort(g):
        preds = list(g.predecessors(node_id))
        layer[node_id] = max((layer[p] + 1 for p in preds), default=0)
    nx.set_node_attributes(g, layer, "layer")
    return nx.multipartite_layout(g, subset_key="layer", align="horizontal")


def render_task_graph(graph: TaskGraph, path: str | Path,
                      title: str | None = None) -> Path:
    path = Path(path)
    positions = _layered_positions(graph)
    fig, ax = plt.subplots(figsize=(9, max(4, len(graph.nodes) * 0.35)))
    g = nx.DiGraph()
    g.add_nodes_from(n.message_id for n in graph.nodes)
    g.add_edges_from(graph.edges)
    colors = [STATUS_COLORS.get(n.status, "#9e9e9e") for n in graph.nodes]
    labels = {}
    for node in graph.nodes:
        if node.duration is not None:
            labels[node.message_id] = f"{node.queue}\n{node.duration * 1000:.0f} ms"
        else:
            labels[node.message_id] = f"{node.queue}\n{node.status.lower()}"
    nx.draw_networkx_edges(g, positions, ax=ax, arrows=True, edge_color="#757575",
                           arrowsize=12)
    nx.draw_networkx_nodes(g, positions, ax=ax, node_color=colors, node_size=900,
                           edgecolors="#424242")
    nx.draw_networkx_labels(g, positions, labels=labels, ax=ax, font_size=7)
    ax.set_title(title or f"Executed tasks for incident {graph.incident_id[:8]}")
    ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def write_report(out_dir: str | Path, *, graph: TaskGraph | None = None,
                 stats: dict[str, StageStats] | None = None) -> list[Path]:
    """Render everything available into out_dir; returns the files written."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    if stats is not None:
        written.append(write_stage_stats_csv(stats, out_dir / "stage_stats.csv"))
        if stats:
            written.append(render_stage_stats(stats, out_dir / "stage_stats.png"))
    if graph is not None and graph.nodes:
        written.append(render_task_graph(graph, out_dir / "task_graph.png"))
    return written
