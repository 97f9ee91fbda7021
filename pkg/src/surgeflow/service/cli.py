"""Command-line entry point: serve the engine, run the wildfire demo end to
end, query a running engine about incidents, and report stage statistics."""

from __future__ import annotations

import argparse
import logging
import os
import sys
import tempfile
import threading
from collections import defaultdict
from pathlib import Path

import requests

from ..statestore import StateStore
from ..wfcore import CLEANUP_QUEUE
from .engine import ConfigError, Engine, EngineConfig, serve

logger = logging.getLogger(__name__)

DEFAULT_API_URL = "http://localhost:8080"


# -- text rendering -----------------------------------------------------------


def format_task_graph(doc: dict) -> str:
    """Render a task-graph document as an indented tree, roots in send order."""
    nodes = {n["message_id"]: n for n in doc["nodes"]}
    children: dict[str, list[str]] = defaultdict(list)
    has_parent = set()
    for parent, child in doc["edges"]:
        children[parent].append(child)
        has_parent.add(child)
    roots = [mid for mid in nodes if mid not in has_parent]
    roots.sort(key=lambda mid: nodes[mid]["sent_timestamp"])
    lines: list[str] = []

    def render(mid: str, depth: int) -> None:
        node = nodes[mid]
        duration = node.get("duration")
        timing = f" ({duration * 1000:.0f} ms)" if duration is not None else ""
        lines.append(f"{'  ' * depth}[{node['status']}] {node['queue']}{timing}")
        for child in sorted(children.get(mid, ()), key=lambda m: nodes[m]["sent_timestamp"]):
            render(child, depth + 1)

    for root in roots:
        render(root, 0)
    return "\n".join(lines) if lines else "(no tasks)"


def format_stats_table(stats: dict) -> str:
    """stats maps queue -> StageStats-shaped object or dict."""
    if not stats:
        return "(no completed tasks)"
    rows = [("stage", "count", "mean wait", "max wait", "mean proc", "max proc")]
    for queue in sorted(stats):
        s = stats[queue]
        get = (lambda k, s=s: s[k]) if isinstance(s, dict) else (lambda k, s=s: getattr(s, k))
        rows.append((queue, str(get("count")),
                     f"{get('mean_wait') * 1000:.1f} ms", f"{get('max_wait') * 1000:.1f} ms",
                     f"{get('mean_processing') * 1000:.1f} ms",
                     f"{get('max_processing') * 1000:.1f} ms"))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip()
                     for row in rows)


# -- subcommands -----------------------------------------------------------------


def cmd_serve(args) -> int:
    try:
        kwargs = {"workers": args.workers, "port": args.port}
        if args.data_dir:
            kwargs["data_dir"] = args.data_dir
        config = EngineConfig(**kwargs)
        if args.machines:
            config.apply_machines_file(args.machines)
        if args.dashboard:
            config.dashboard_dir = Path(args.dashboard)
        engine = serve(config)
    except (ConfigError, RuntimeError) as exc:
        print(f"startup failed: {exc}", file=sys.stderr)
        return 1
    print(f"surgeflow engine on port {engine.api_port}; data dir {config.data_dir}")
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        print("shutting down")
    finally:
        engine.stop()
    return 0


def cmd_demo(args) -> int:
    from ..demo_wildfire import (
        WILDFIRE_KIND,
        DemoError,
        build_wildfire_workflow,
        run_demo,
    )

    data_dir = args.data_dir or tempfile.mkdtemp(prefix="surgeflow-demo-")
    try:
        config = EngineConfig(data_dir=data_dir, workers=args.workers)
    except ConfigError as exc:
        print(f"startup failed: {exc}", file=sys.stderr)
        return 1
    engine = Engine(config)
    try:
        recovered = engine.recover()
        if recovered:
            print(f"{recovered} message(s) recovered from a previous run")
        engine.register_workflow(build_wildfire_workflow())
        engine.start_workers()
        incident_id = run_demo(engine,
                               hotspot_source=args.hotspot_source,
                               forecast_kind=args.forecast_kind.upper())
        record = engine.store.get_incident(incident_id)
        graph = engine.task_graph(incident_id)
        print(f"incident {incident_id} finished {record.status.value} "
              f"({len(graph.nodes)} tasks)\n")
        print(format_task_graph(graph.to_doc()))
        stats = engine.store.stage_statistics(workflow_kind=WILDFIRE_KIND,
                                              exclude_queues=(CLEANUP_QUEUE,))
        print("\n" + format_stats_table(stats))
        if args.report_dir:
            from .report import write_report

            written = write_report(args.report_dir, graph=graph, stats=stats)
            for path in written:
                print(f"wrote {path}")
        return 0 if record.status.value == "COMPLETED" else 1
    except DemoError as exc:
        print(f"demo failed: {exc}", file=sys.stderr)
        return 1
    finally:
        engine.stop()
        if not args.data_dir:
            import shutil

            shutil.rmtree(data_dir, ignore_errors=True)


def cmd_incidents(args) -> int:
    base = args.api_url.rstrip("/")
    try:
        if args.action == "list":
            resp = requests.get(f"{base}/api/incidents", timeout=10)
            resp.raise_for_status()
            incidents = resp.json()
            if not incidents:
                print("(no incidents)")
                return 0
            for inc in incidents:
                print(f"{inc['incident_id']}  {inc['status']:<10} {inc['workflow_kind']:<12}"
                      f" {inc['label']}")
            return 0
        if args.action == "show":
            resp = requests.get(f"{base}/api/incidents/{args.incident_id}", timeout=10)
            if resp.status_code == 404:
                print("not found", file=sys.stderr)
                return 1
            resp.raise_for_status()
            doc = resp.json()
            inc = doc["incident"]
            print(f"{inc['incident_id']}  {inc['status']}  {inc['workflow_kind']}"
                  f"  {inc['label']}")
            print(format_task_graph(doc["task_graph"]))
            print("\n" + format_stats_table(doc["statistics"]))
            return 0
        if args.action == "cancel":
            resp = requests.post(f"{base}/api/incidents/{args.incident_id}/cancel", timeout=10)
            if resp.status_code == 404:
                print("not found", file=sys.stderr)
                return 1
            if resp.status_code == 409:
                print(resp.json().get("error", "cannot cancel"), file=sys.stderr)
                return 1
            resp.raise_for_status()
            print(f"incident {args.incident_id} cancelled")
            return 0
    except requests.RequestException as exc:
        print(f"API unreachable at {base}: {exc}", file=sys.stderr)
        return 1
    return 2


def cmd_stats(args) -> int:
    db = Path(args.data_dir) / "state.sqlite3"
    if not db.exists():
        print(f"no statestore under {args.data_dir}", file=sys.stderr)
        return 1
    store = StateStore(db)
    try:
        if args.kind not in store.workflow_kinds():
            print(f"unknown workflow kind: {args.kind}", file=sys.stderr)
            return 1
        stats = store.stage_statistics(workflow_kind=args.kind,
                                       exclude_queues=(CLEANUP_QUEUE,))
        print(format_stats_table(stats))
        if args.report_dir:
            from .report import write_report

            for path in write_report(args.report_dir, stats=stats):
                print(f"wrote {path}")
        return 0
    finally:
        store.close()


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="surgeflow",
        description="Data-driven workflow engine for urgent computing")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p_serve = sub.add_parser("serve", help="run the engine with workers and the HTTP API")
    p_serve.add_argument("--port", type=int, default=8080)
    p_serve.add_argument("--workers", type=int,
                         default=int(os.environ.get("SURGEFLOW_WORKERS", "4")))
    p_serve.add_argument("--data-dir", default=None)
    p_serve.add_argument("--machines", default=None, help="JSON machine roster file")
    p_serve.add_argument("--dashboard", default=None, help="static dashboard asset directory")
    p_serve.set_defaults(func=cmd_serve)

    p_demo = sub.add_parser("demo", help="run a demo workflow end to end")
    p_demo.add_argument("workflow", choices=["wildfire"])
    p_demo.add_argument("--hotspot-source", choices=["modis", "viirs", "ground"],
                        default="ground")
    p_demo.add_argument("--forecast-kind", choices=["perimeter", "exposure_shed"],
                        default="perimeter")
    p_demo.add_argument("--workers", type=int, default=4)
    p_demo.add_argument("--data-dir", default=None,
                        help="persist engine state here instead of a throwaway directory")
    p_demo.add_argument("--report-dir", default=None,
                        help="write task-graph/statistics figures and CSV here")
    p_demo.set_defaults(func=cmd_demo)

    p_inc = sub.add_parser("incidents", help="query a running engine")
    inc_sub = p_inc.add_subparsers(dest="action", metavar="action", required=True)
    p_list = inc_sub.add_parser("list")
    p_show = inc_sub.add_parser("show")
    p_show.add_argument("incident_id")
    p_cancel = inc_sub.add_parser("cancel")
    p_cancel.add_argument("incident_id")
    for p in (p_list, p_show, p_cancel):
        p.add_argument("--api-url", default=DEFAULT_API_URL)
    p_inc.set_defaults(func=cmd_incidents)

    p_stats = sub.add_parser("stats", help="per-stage statistics for a workflow kind")
    p_stats.add_argument("kind")
    p_stats.add_argument("--data-dir", default="./data")
    p_stats.add_argument("--report-dir", default=None)
    p_stats.set_defaults(func=cmd_stats)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s %(levelname)-7s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(file=sys.stderr)
        return 2
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
