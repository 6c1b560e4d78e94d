"""Command line interface.

Subcommands:
  validate       parse a workflow file and report structure facts
  simulate       run a workflow against a worker scenario
  generate-adapt emit the built-in advection-diffusion demo workflow
  audit          replay an event log through the order checkers
  report         summarize an event log

Exit codes: 0 success, 1 domain failure (cycle, failed or unfinished
simulation, audit violations), 2 bad usage or unreadable/malformed
input files.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .actors import EngineConfig
from .adapt import SimParams, generate_adapt_workflow
from .errors import (
    EngineError,
    InvalidGeometry,
    MalformedLog,
    SchemaError,
    ValidationError,
    WorkflowSyntaxError,
)
from .graph import validate_structure
from .simulator import (
    Scenario,
    lifecycle_audit,
    load_scenario,
    parse_log,
    precedence_audit,
    run_simulation,
)
from .execution import Workspace
from .workflow_io import parse_workflow, serialize_workflow


def _read(path: str) -> str:
    try:
        return Path(path).read_text("utf-8")
    except OSError as exc:
        raise FileError(f"cannot read {path}: {exc.strerror or exc}") from exc


class FileError(Exception):
    """Unreadable or unparseable input file; maps to exit code 2."""


def _load_workflow(path: str, fmt: str):
    text = _read(path)
    try:
        return parse_workflow(text, format=fmt)
    except (WorkflowSyntaxError, SchemaError) as exc:
        raise FileError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------- commands

def cmd_validate(args: argparse.Namespace) -> int:
    batch = _load_workflow(args.workflow, args.format)
    report = validate_structure(batch)
    edges = len(batch.edges())
    if args.json:
        doc = {
            "ok": report.ok,
            "tasks": len(batch.tasks),
            "edges": edges,
            "series_parallel": report.series_parallel,
            "cycle": report.cycle,
        }
        print(json.dumps(doc, indent=2, sort_keys=True))
    else:
        sp = "yes" if report.series_parallel else "no"
        print(f"{len(batch.tasks)} tasks, {edges} edges, "
              f"series-parallel: {sp}")
        if not report.ok:
            print("cycle: " + " -> ".join(report.cycle or []),
                  file=sys.stderr)
    return 0 if report.ok else 1


def cmd_simulate(args: argparse.Namespace) -> int:
    batch = _load_workflow(args.workflow, args.format)
    try:
        scenario = load_scenario(args.scenario)
    except (OSError, json.JSONDecodeError, SchemaError) as exc:
        raise FileError(f"{args.scenario}: {exc}") from exc
    if args.seed is not None:
        scenario = dataclasses.replace(scenario, seed=args.seed)
    config = None
    if args.config:
        try:
            config = EngineConfig.from_file(args.config)
        except (OSError, json.JSONDecodeError, ValueError) as exc:
            raise FileError(f"{args.config}: {exc}") from exc
    workspace = None
    if args.workspace:
        root = Path(args.workspace)
        root.mkdir(parents=True, exist_ok=True)
        workspace = Workspace(root)
    report, _log = run_simulation(
        batch, scenario, config=config, workspace=workspace,
        log_path=args.log)
    if args.json:
        print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    else:
        print(f"completed: {'yes' if report.completed else 'no'}")
        print(f"makespan: {report.makespan}")
        print(f"tasks: {report.tasks_total}")
        print(f"re-executions: {report.re_executions}")
        print(f"messages: {report.messages_total}")
        for channel in sorted(report.messages_by_channel):
            print(f"  {channel}: {report.messages_by_channel[channel]}")
        if report.per_worker_utilization:
            print("utilization:")
            for wid in sorted(report.per_worker_utilization):
                print(f"  {wid}: {report.per_worker_utilization[wid]:.3f}")
    return 0 if report.completed else 1


def cmd_generate_adapt(args: argparse.Namespace) -> int:
    params = SimParams(
        dt=args.dt,
        advection=args.advection,
        diffusion=args.diffusion,
        steps=args.iterations,
        bc=args.bc,
    )
    params.check_cfl(args.cells)
    batch = generate_adapt_workflow(
        partitions=args.partitions,
        iterations=args.iterations,
        cells=args.cells,
        params=params,
        edges=args.edges,
        unfold_solver=args.unfold_solver,
    )
    text = serialize_workflow(batch)
    if args.output:
        Path(args.output).write_text(text, "utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_audit(args: argparse.Namespace) -> int:
    text = _read(args.log)
    batch = None
    if args.workflow:
        batch = _load_workflow(args.workflow, args.format)
    try:
        violations = precedence_audit(text, batch)
        violations += lifecycle_audit(text)
    except MalformedLog as exc:
        raise FileError(f"{args.log}: {exc}") from exc
    if args.json:
        print(json.dumps({"ok": not violations, "violations": violations},
                         indent=2))
    else:
        if violations:
            for line in violations:
                print(line)
        else:
            print("clean")
    return 0 if not violations else 1


def cmd_report(args: argparse.Namespace) -> int:
    text = _read(args.log)
    try:
        records = parse_log(text)
    except MalformedLog as exc:
        raise FileError(f"{args.log}: {exc}") from exc
    by_channel: dict[str, int] = {}
    by_kind: dict[str, int] = {}
    attempts: dict[str, int] = {}
    completed = False
    failed = False
    makespan = 0
    for record in records:
        by_channel[record["channel"]] = by_channel.get(record["channel"], 0) + 1
        by_kind[record["kind"]] = by_kind.get(record["kind"], 0) + 1
        makespan = max(makespan, record["ts"])
        payload = record["payload"]
        if record["kind"] == "task":
            tid = payload["task_id"]
            attempts[tid] = max(attempts.get(tid, 1), payload["attempt"])
        elif record["kind"] == "emergency":
            completed = payload.get("reason") == "complete"
            failed = payload.get("reason") == "failed"
    doc = {
        "messages_total": len(records),
        "messages_by_channel": dict(sorted(by_channel.items())),
        "messages_by_kind": dict(sorted(by_kind.items())),
        "tasks_seen": len(attempts),
        "re_executions": sum(a - 1 for a in attempts.values()),
        "makespan": makespan,
        "completed": completed,
        "failed": failed,
    }
    if args.json:
        print(json.dumps(doc, indent=2))
    else:
        print(f"messages: {doc['messages_total']}")
        for channel in sorted(by_channel):
            print(f"  {channel}: {by_channel[channel]}")
        print(f"tasks seen: {doc['tasks_seen']}")
        print(f"re-executions: {doc['re_executions']}")
        print(f"makespan: {doc['makespan']}")
        print(f"completed: {'yes' if completed else 'no'}")
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pubflow",
        description="publish-subscribe workflow engine and simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a workflow file")
    p.add_argument("workflow")
    p.add_argument("--format", choices=("json", "xml"), default="json")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("simulate", help="run a workflow in the simulator")
    p.add_argument("workflow")
    p.add_argument("scenario")
    p.add_argument("--format", choices=("json", "xml"), default="json")
    p.add_argument("--config", help="engine config JSON")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.add_argument("--log", help="write the event log (JSONL) here")
    p.add_argument("--workspace", help="dataset directory (default: temp)")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("generate-adapt",
                       help="emit the advection-diffusion demo workflow")
    p.add_argument("--cells", type=int, default=64)
    p.add_argument("--partitions", type=int, default=4)
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--dt", type=float, default=1e-4)
    p.add_argument("--advection", type=float, default=1.0)
    p.add_argument("--diffusion", type=float, default=0.1)
    p.add_argument("--bc", choices=("dirichlet0", "periodic"),
                   default="dirichlet0")
    p.add_argument("--edges", choices=("stencil", "barrier"),
                   default="stencil")
    p.add_argument("--unfold-solver", action="store_true")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_generate_adapt)

    p = sub.add_parser("audit", help="check an event log for order bugs")
    p.add_argument("log")
    p.add_argument("--workflow", help="cross-check against this workflow")
    p.add_argument("--format", choices=("json", "xml"), default="json")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("report", help="summarize an event log")
    p.add_argument("log")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, InvalidGeometry, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    entrypoint()
