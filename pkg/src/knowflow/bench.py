"""Benchmark harness: suites of (goal, gold workflow) cases and their metrics.

End-to-end metrics (TSR, FPA, NTC, NI) come from run counters; step metrics
(InstAcc, ToolAcc, ArgAcc) align the executed workflow, linearized in
canonical topological order, position by position against the gold call
sequence, padding the shorter side with gaps.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import os
from dataclasses import dataclass, field
from itertools import zip_longest
from typing import Any, Iterable, Mapping, Sequence

from knowflow.errors import DuplicateCaseId, EmptySuite, KnowFlowError, Malformed
from knowflow.executor import RunConfig, RunResult, run_task
from knowflow.memory import MemoryStore
from knowflow.pkb import TaskGoal, TemplateLibrary
from knowflow.schema import ToolRegistry, check_fields, load_json_text
from knowflow.simenv import PlannerInterface, SimEnvironment, load_environment
from knowflow.workflow import topological_order

log = logging.getLogger(__name__)

DIFFICULTIES = ("simple", "complex")
CSV_COLUMNS = ("config", "difficulty", "tsr", "fpa", "ntc", "ni", "inst_acc", "tool_acc", "arg_acc", "overall")


@dataclass(frozen=True)
class GoldStep:
    tool_name: str
    args: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "args", dict(self.args))

    def to_dict(self) -> dict:
        return {"tool_name": self.tool_name, "args": copy.deepcopy(dict(self.args))}

    @classmethod
    def from_dict(cls, doc: Any, where: str = "gold step") -> "GoldStep":
        check_fields(doc, ("tool_name",), ("args",), where)
        return cls(doc["tool_name"], copy.deepcopy(dict(doc.get("args", {}))))


@dataclass(frozen=True)
class BenchmarkCase:
    case_id: str
    goal: TaskGoal
    difficulty: str
    gold: tuple[GoldStep, ...]
    environment: str | None = None
    env: SimEnvironment | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "gold", tuple(self.gold))
        if not self.gold:
            raise Malformed(f"case {self.case_id!r}: gold workflow is empty")
        if self.difficulty not in DIFFICULTIES:
            raise Malformed(f"case {self.case_id!r}: difficulty must be one of {DIFFICULTIES}")

    def to_dict(self) -> dict:
        d = {
            "case_id": self.case_id,
            "goal": self.goal.to_dict(),
            "difficulty": self.difficulty,
            "gold": [g.to_dict() for g in self.gold],
        }
        if self.environment is not None:
            d["environment"] = self.environment
        return d

    @classmethod
    def from_dict(cls, doc: Any, where: str = "case") -> "BenchmarkCase":
        check_fields(doc, ("case_id", "goal", "difficulty", "gold"), ("environment",), where)
        if not isinstance(doc["gold"], list):
            raise Malformed(f"{where}: gold must be a list")
        return cls(
            str(doc["case_id"]),
            TaskGoal.from_dict(doc["goal"], f"{where}.goal"),
            doc["difficulty"],
            tuple(GoldStep.from_dict(g, f"{where}.gold[{i}]") for i, g in enumerate(doc["gold"])),
            doc.get("environment"),
        )


def parse_suite(docs: Any, base_dir: str | os.PathLike | None = None) -> list[BenchmarkCase]:
    if not isinstance(docs, list):
        raise Malformed("suite file must hold a JSON array of cases")
    cases = [BenchmarkCase.from_dict(d, f"cases[{i}]") for i, d in enumerate(docs)]
    seen = set()
    for c in cases:
        if c.case_id in seen:
            raise DuplicateCaseId(f"duplicate case id {c.case_id!r}")
        seen.add(c.case_id)
    if base_dir is not None:
        cache: dict[str, SimEnvironment] = {}
        resolved = []
        for c in cases:
            env = None
            if c.environment is not None:
                if c.environment not in cache:
                    cache[c.environment] = load_environment(os.path.join(base_dir, c.environment))
                env = cache[c.environment]
            resolved.append(BenchmarkCase(c.case_id, c.goal, c.difficulty, c.gold, c.environment, env))
        cases = resolved
    return sorted(cases, key=lambda c: c.case_id)


def load_suite(path) -> list[BenchmarkCase]:
    with open(path, encoding="utf-8") as fh:
        docs = load_json_text(fh.read())
    return parse_suite(docs, os.path.dirname(os.path.abspath(path)))


def serialize_suite(cases: Iterable[BenchmarkCase]) -> list[dict]:
    return [c.to_dict() for c in cases]


@dataclass(frozen=True)
class StepMatches:
    aligned: int
    inst_hits: int
    tool_hits: int
    arg_hits: int

    def to_dict(self) -> dict:
        return {"aligned": self.aligned, "inst_hits": self.inst_hits, "tool_hits": self.tool_hits, "arg_hits": self.arg_hits}


def generated_steps(result: RunResult) -> list[tuple[str, str, Mapping[str, Any]]]:
    """(node id, tool, args) of the final workflow in canonical order."""
    dag = result.trace.w_final
    return [(nid, dag.nodes[nid].tool_name, dag.nodes[nid].args) for nid in topological_order(dag)]


def compare_to_gold(result: RunResult, gold: Sequence[GoldStep]) -> StepMatches:
    gen = generated_steps(result)
    malformed = set(result.trace.format_failures)
    inst = tool = arg = 0
    aligned = 0
    for g_step, gold_step in zip_longest(gen, gold):
        aligned += 1
        if g_step is None or gold_step is None:
            continue
        nid, tool_name, args = g_step
        if nid not in malformed:
            inst += 1
        if tool_name == gold_step.tool_name:
            tool += 1
            if all(k in args and args[k] == v for k, v in gold_step.args.items()):
                arg += 1
    return StepMatches(aligned, inst, tool, arg)


def _is_number(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def judge_success(result: RunResult, gold: Sequence[GoldStep], registry: ToolRegistry) -> bool:
    """Task success: run completed, gold effects present, gold numeric args honoured."""
    if result.outcome != "success":
        return False
    needed = set()
    for g in gold:
        schema = registry.get(g.tool_name)
        if schema is None:
            return False
        needed |= schema.bind(g.args).add_effects
    if not needed <= result.final_state.atoms:
        return False
    ran = [(tool, args) for _, tool, args in generated_steps(result)]
    for g in gold:
        numeric = {k: v for k, v in g.args.items() if _is_number(v)}
        if not numeric:
            continue
        same_tool = [args for tool, args in ran if tool == g.tool_name]
        if same_tool and not any(all(a.get(k) == v for k, v in numeric.items()) for a in same_tool):
            return False
    return True


@dataclass(frozen=True)
class CaseResult:
    case_id: str
    difficulty: str
    outcome: str
    success: bool
    first_pass: bool
    tool_calls: int
    planner_calls: int
    interactions: int
    adjustments: int
    steps: StepMatches
    template_id: str | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        d = {
            "case_id": self.case_id,
            "difficulty": self.difficulty,
            "outcome": self.outcome,
            "success": self.success,
            "first_pass": self.first_pass,
            "tool_calls": self.tool_calls,
            "planner_calls": self.planner_calls,
            "interactions": self.interactions,
            "adjustments": self.adjustments,
            "steps": self.steps.to_dict(),
            "template_id": self.template_id,
        }
        if self.error is not None:
            d["error"] = self.error
        return d


def score_case(case: BenchmarkCase, result: RunResult, registry: ToolRegistry) -> CaseResult:
    success = judge_success(result, case.gold, registry)
    return CaseResult(
        case.case_id,
        case.difficulty,
        result.outcome,
        success,
        success and result.first_pass,
        result.tool_calls,
        result.planner_calls,
        result.interactions,
        result.adjustments,
        compare_to_gold(result, case.gold),
        result.trace.template_id,
    )


@dataclass(frozen=True)
class Aggregate:
    n: int
    tsr: float
    fpa: float
    ntc: float
    ni: float
    inst_acc: float
    tool_acc: float
    arg_acc: float

    @property
    def overall(self) -> float:
        return (self.inst_acc + self.tool_acc + self.arg_acc) / 3

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "tsr": self.tsr,
            "fpa": self.fpa,
            "ntc": self.ntc,
            "ni": self.ni,
            "inst_acc": self.inst_acc,
            "tool_acc": self.tool_acc,
            "arg_acc": self.arg_acc,
            "overall": self.overall,
        }


def _aggregate(results: Sequence[CaseResult]) -> Aggregate:
    n = len(results)
    aligned = sum(r.steps.aligned for r in results)

    def pct(hits: int, total: int) -> float:
        return 100.0 * hits / total if total else 0.0

    return Aggregate(
        n,
        pct(sum(r.success for r in results), n),
        pct(sum(r.first_pass for r in results), n),
        sum(r.tool_calls for r in results) / n,
        sum(r.interactions for r in results) / n,
        pct(sum(r.steps.inst_hits for r in results), aligned),
        pct(sum(r.steps.tool_hits for r in results), aligned),
        pct(sum(r.steps.arg_hits for r in results), aligned),
    )


@dataclass(frozen=True)
class SuiteReport:
    config: str
    epoch: int
    cases: tuple[CaseResult, ...]
    aggregates: Mapping[str, Aggregate]

    @property
    def totals(self) -> dict[str, int]:
        return {
            key: sum(getattr(c, key) for c in self.cases)
            for key in ("tool_calls", "planner_calls", "interactions", "adjustments")
        }

    @property
    def overall(self) -> Aggregate:
        return self.aggregates["all"]

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "epoch": self.epoch,
            "aggregates": {k: a.to_dict() for k, a in self.aggregates.items()},
            "totals": self.totals,
            "cases": [c.to_dict() for c in self.cases],
        }


def compute_metrics(results: Sequence[CaseResult], config: str = "", epoch: int = 1) -> SuiteReport:
    if not results:
        raise EmptySuite("cannot compute metrics over zero cases")
    groups: dict[str, Aggregate] = {}
    for diff in DIFFICULTIES:
        subset = [r for r in results if r.difficulty == diff]
        if subset:
            groups[diff] = _aggregate(subset)
    groups["all"] = _aggregate(results)
    return SuiteReport(config, epoch, tuple(results), groups)


def _failed_case(case: BenchmarkCase, exc: Exception) -> CaseResult:
    return CaseResult(
        case.case_id,
        case.difficulty,
        "terminal_failure",
        False,
        False,
        0,
        0,
        1,
        0,
        StepMatches(len(case.gold), 0, 0, 0),
        None,
        f"{type(exc).__name__}: {exc}",
    )


def run_suite(
    cases: Sequence[BenchmarkCase],
    library: TemplateLibrary,
    store: MemoryStore,
    registry: ToolRegistry,
    planner: PlannerInterface | None,
    config: RunConfig,
    epochs: int = 1,
    default_env: SimEnvironment | None = None,
) -> list[SuiteReport]:
    """Run cases in id order for each epoch.

    With learning enabled, the library and store evolve across cases and
    epochs; with learning off every case starts from the given knowledge.
    """
    if epochs < 1:
        raise ValueError("epochs must be at least 1")
    if not cases:
        raise EmptySuite("suite has no cases")
    ordered = sorted(cases, key=lambda c: c.case_id)
    reports = []
    lib, mem = library, store
    for epoch in range(1, epochs + 1):
        results = []
        for case in ordered:
            env = case.env or default_env
            if env is None:
                results.append(_failed_case(case, Malformed("no environment for case")))
                continue
            try:
                result, new_lib, new_mem = run_task(case.goal, lib, mem, env, registry, planner, config)
            except KnowFlowError as exc:
                log.info("case %s failed before execution: %s", case.case_id, exc)
                results.append(_failed_case(case, exc))
                continue
            if config.learning:
                lib, mem = new_lib, new_mem
            results.append(score_case(case, result, registry))
        reports.append(compute_metrics(results, config.name, epoch))
    return reports


def _label(report: SuiteReport, multi_epoch: bool) -> str:
    return f"{report.config}#e{report.epoch}" if multi_epoch else report.config


def _fmt(x: float) -> str:
    return f"{x:.4f}"


def emit_report(reports: SuiteReport | Sequence[SuiteReport], format: str = "json") -> str:
    if isinstance(reports, SuiteReport):
        reports = [reports]
    if format == "json":
        return json.dumps([r.to_dict() for r in reports], indent=2) + "\n"
    if format != "csv":
        raise ValueError(f"unknown report format {format!r}")
    multi_epoch = len({r.epoch for r in reports}) > 1
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in reports:
        for diff, agg in r.aggregates.items():
            writer.writerow(
                [_label(r, multi_epoch), diff]
                + [_fmt(getattr(agg, k)) for k in ("tsr", "fpa", "ntc", "ni", "inst_acc", "tool_acc", "arg_acc", "overall")]
            )
    return buf.getvalue()
