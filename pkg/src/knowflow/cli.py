"""Command-line entry point.

Exit codes: 0 success, 1 task or validation failure, 2 usage or file-format
error. Results go to standard output; diagnostics go to standard error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from typing import Any, Sequence

from knowflow.bench import emit_report, load_suite, run_suite
from knowflow.errors import EmptyLibrary, KnowFlowError, Malformed
from knowflow.executor import RunConfig, run_task
from knowflow.memory import append_jsonl, export_store, read_jsonl
from knowflow.pkb import instantiate, load_goal, load_library, retrieve_template, save_library
from knowflow.schema import load_json_text, load_registry
from knowflow.simenv import NullPlanner, load_environment, load_planner_script, remote_planner
from knowflow.workflow import load_workflow, validate

log = logging.getLogger("knowflow")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _dump(doc: Any) -> str:
    return json.dumps(doc, indent=2) + "\n"


def _pick_planner(path: str | None):
    if path:
        return load_planner_script(path)
    return remote_planner() or NullPlanner()


def cmd_validate(args) -> int:
    registry = load_registry(args.tools)
    dag = load_workflow(args.workflow)
    report = validate(dag, registry)
    if args.format == "json":
        sys.stdout.write(_dump(report.to_dict()))
    else:
        print(f"acyclic: {str(report.acyclic).lower()}")
        for nid, atom in report.unsatisfied:
            print(f"unsatisfied: {nid} needs {atom}")
        for nid, param, reason in report.arg_errors:
            print(f"arg error: {nid}.{param}: {reason}")
        for w in report.warnings:
            print(f"warning: {w}")
        print("ok" if report.ok else "invalid")
    return EXIT_OK if report.ok else EXIT_FAIL


def cmd_plan(args) -> int:
    registry = load_registry(args.tools)
    goal = load_goal(args.goal)
    library = load_library(args.library)
    dag = None
    for tid, score in retrieve_template(goal, library):
        if score <= 0:
            break
        try:
            dag = instantiate(library[tid], goal, registry)
            log.info("instantiated template %s (score %.3f)", tid, score)
            break
        except KnowFlowError as exc:
            log.info("template %s skipped: %s", tid, exc)
    if dag is None:
        print("no template matches the goal", file=sys.stderr)
        return EXIT_FAIL
    text = dag.to_json() + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_run(args) -> int:
    registry = load_registry(args.tools)
    goal = load_goal(args.goal)
    library = load_library(args.library)
    env = load_environment(args.env)
    store = read_jsonl(args.memory)
    config = RunConfig(seed=args.seed).ablate(wl=args.no_wl, da=args.no_da, lc=args.no_lc)
    try:
        result, new_library, new_store = run_task(goal, library, store, env, registry, _pick_planner(args.planner), config)
    except EmptyLibrary as exc:
        print(f"cannot plan: {exc}", file=sys.stderr)
        return EXIT_FAIL
    append_jsonl(args.memory, new_store.records_since(store))
    if args.update_library and new_library != library:
        save_library(new_library, args.library)
    if args.format == "json":
        sys.stdout.write(_dump(result.to_dict()))
    else:
        c = result.counters
        print(f"outcome: {result.outcome}")
        print(f"first_pass: {str(result.first_pass).lower()}")
        print(" ".join(f"{k}={v}" for k, v in c.items()))
        for adj in result.trace.adjustments:
            status = "accepted" if adj.accepted else "not applied"
            print(f"tier {adj.tier} at {adj.node_id}: {adj.action.describe()} ({status})")
    return EXIT_OK if result.outcome == "success" else EXIT_FAIL


def _load_bench_config(path: str) -> tuple[dict, list[RunConfig]]:
    with open(path, encoding="utf-8") as fh:
        doc = load_json_text(fh.read())
    if not isinstance(doc, dict) or "tools" not in doc or not isinstance(doc.get("configs"), list):
        raise Malformed(f"{path}: bench config needs 'tools' and a 'configs' list")
    unknown = set(doc) - {"tools", "planner", "memory", "configs"}
    if unknown:
        raise Malformed(f"{path}: unknown fields {sorted(unknown)}")
    base = os.path.dirname(os.path.abspath(path))
    paths = {k: os.path.join(base, doc[k]) for k in ("tools", "planner", "memory") if doc.get(k)}
    configs = [RunConfig.from_dict(c, f"configs[{i}]") for i, c in enumerate(doc["configs"])]
    if not configs:
        raise Malformed(f"{path}: no configs listed")
    return paths, configs


def cmd_bench(args) -> int:
    if args.epochs < 1:
        print("--epochs must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    paths, configs = _load_bench_config(args.config)
    registry = load_registry(paths["tools"])
    planner = _pick_planner(paths.get("planner"))
    cases = load_suite(args.suite)
    library = load_library(args.library)
    store = read_jsonl(paths["memory"]) if "memory" in paths else read_jsonl(os.devnull)
    reports = []
    for config in configs:
        if args.seed is not None:
            config = dataclasses.replace(config, seed=args.seed)
        reports += run_suite(cases, library, store, registry, planner, config, args.epochs)
    sys.stdout.write(emit_report(reports, args.format))
    if args.figures:
        from knowflow.plotting import render_figures

        for p in render_figures(reports, args.figures):
            log.info("wrote %s", p)
    return EXIT_OK


def cmd_memory(args) -> int:
    store = read_jsonl(args.memory)
    if args.action == "export" or args.format == "json":
        sys.stdout.write(_dump(export_store(store)))
        return EXIT_OK
    print(f"{len(store.traces)} traces, {len(store.rules)} rules")
    for t in store.traces:
        print(f"{t.trace_id}: {t.outcome} tools={len(t.history)} adjustments={len(t.adjustments)} tags={','.join(sorted(t.goal.tags))}")
    for r in store.rules:
        print(f"{r.rule_id}: {r}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="knowflow", description="Knowledge-guided workflow planning, execution and repair.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def fmt(p, choices=("text", "json"), default="text"):
        p.add_argument("--format", choices=choices, default=default)

    p = sub.add_parser("validate", help="check a workflow against the tool schemas")
    p.add_argument("--workflow", required=True)
    p.add_argument("--tools", required=True)
    fmt(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("plan", help="instantiate the best-matching template for a goal")
    p.add_argument("--goal", required=True)
    p.add_argument("--library", required=True)
    p.add_argument("--tools", required=True)
    p.add_argument("--out", help="write the workflow here instead of standard output")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("run", help="plan, execute and learn from one task")
    p.add_argument("--goal", required=True)
    p.add_argument("--library", required=True)
    p.add_argument("--memory", required=True, help="JSON-lines store; created if missing")
    p.add_argument("--env", required=True)
    p.add_argument("--tools", required=True)
    p.add_argument("--planner", help="scripted planner file (default: remote planner if configured)")
    p.add_argument("--no-wl", action="store_true", help="disable the workflow library")
    p.add_argument("--no-da", action="store_true", help="disable dynamic adjustment")
    p.add_argument("--no-lc", action="store_true", help="disable learning")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--update-library", action="store_true", help="save solidified templates back to the library")
    fmt(p, default="json")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", help="run a benchmark suite under one or more configurations")
    p.add_argument("--suite", required=True)
    p.add_argument("--library", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--seed", type=int, default=None, help="override the seed of every configuration")
    p.add_argument("--figures", metavar="DIR", help="also render PNG figures into DIR")
    fmt(p, ("json", "csv"), "json")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("memory", help="inspect or export the evolutionary memory")
    p.add_argument("action", choices=("inspect", "export"))
    p.add_argument("--memory", required=True)
    fmt(p)
    p.set_defaults(func=cmd_memory)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (Malformed, json.JSONDecodeError, OSError) as exc:
        print(f"knowflow: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KnowFlowError as exc:
        print(f"knowflow: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
