"""Orchestrator: monitored execution, hierarchical repair and post-task learning.

The next action is a deterministic function of the execution history, the
current workflow and the evolutionary memory. One run is strictly
sequential; repairs resume execution at the repaired node without re-running
completed ancestors.
"""

from __future__ import annotations

import dataclasses
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Mapping

from knowflow.actions import RepairAction
from knowflow.errors import (
    ArgKindMismatch,
    EmptyLibrary,
    KnowFlowError,
    Malformed,
    NotAFailure,
    RepairRejected,
)
from knowflow.memory import (
    QUALITY_ERROR,
    Adjustment,
    ExecutionTrace,
    FailureSignature,
    HistoryEntry,
    MemoryStore,
    attribute_failure,
    harvest_successful_repairs,
    query_repair,
    record_trace,
)
from knowflow.pkb import TaskGoal, TemplateLibrary, instantiate, retrieve_template, solidify
from knowflow.schema import ToolRegistry, WorldState, check_fields
from knowflow.simenv import PlannerInterface, RepairRequest, SimEnvironment, execute_tool
from knowflow.workflow import (
    WorkflowDag,
    bound_schema,
    insert_node,
    modify_params,
    replace_node,
    topological_order,
    validate,
)

log = logging.getLogger(__name__)

__all__ = [
    "RepairAction",
    "RunConfig",
    "RunResult",
    "apply_repair",
    "diagnose",
    "execute_workflow",
    "run_task",
    "select_repair",
]


@dataclass(frozen=True)
class RunConfig:
    name: str = "full"
    max_repairs_per_node: int = 3
    max_total_adjustments: int = 10
    tier1: bool = True
    tier2: bool = True
    workflow_library: bool = True
    dynamic_adjustment: bool = True
    learning: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.max_repairs_per_node < 0 or self.max_total_adjustments < 0:
            raise Malformed("repair budgets must be nonnegative")

    def ablate(self, *, wl: bool = False, da: bool = False, lc: bool = False, name: str | None = None) -> "RunConfig":
        return dataclasses.replace(
            self,
            name=name or self.name,
            workflow_library=self.workflow_library and not wl,
            dynamic_adjustment=self.dynamic_adjustment and not da,
            learning=self.learning and not lc,
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "max_repairs_per_node": self.max_repairs_per_node,
            "max_total_adjustments": self.max_total_adjustments,
            "tiers_enabled": {"tier1": self.tier1, "tier2": self.tier2},
            "ablations": {
                "workflow_library": self.workflow_library,
                "dynamic_adjustment": self.dynamic_adjustment,
                "learning": self.learning,
            },
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: Any, where: str = "run config") -> "RunConfig":
        check_fields(
            doc, (), ("name", "max_repairs_per_node", "max_total_adjustments", "tiers_enabled", "ablations", "seed"), where
        )
        tiers = doc.get("tiers_enabled", {})
        abl = doc.get("ablations", {})
        check_fields(tiers, (), ("tier1", "tier2"), f"{where}.tiers_enabled")
        check_fields(abl, (), ("workflow_library", "dynamic_adjustment", "learning"), f"{where}.ablations")
        return cls(
            name=str(doc.get("name", "full")),
            max_repairs_per_node=int(doc.get("max_repairs_per_node", 3)),
            max_total_adjustments=int(doc.get("max_total_adjustments", 10)),
            tier1=bool(tiers.get("tier1", True)),
            tier2=bool(tiers.get("tier2", True)),
            workflow_library=bool(abl.get("workflow_library", True)),
            dynamic_adjustment=bool(abl.get("dynamic_adjustment", True)),
            learning=bool(abl.get("learning", True)),
            seed=int(doc.get("seed", 0)),
        )


@dataclass(frozen=True)
class RunResult:
    outcome: str
    trace: ExecutionTrace
    tool_calls: int = 0
    planner_calls: int = 0
    interactions: int = 0
    adjustments: int = 0
    final_state: WorldState = WorldState()

    @property
    def first_pass(self) -> bool:
        return self.outcome == "success" and self.adjustments == 0

    @property
    def counters(self) -> dict[str, int]:
        return {
            "tool_calls": self.tool_calls,
            "planner_calls": self.planner_calls,
            "interactions": self.interactions,
            "adjustments": self.adjustments,
        }

    def to_dict(self) -> dict:
        return {
            "outcome": self.outcome,
            "first_pass": self.first_pass,
            "counters": self.counters,
            "final_state": [a.to_dict() for a in sorted(self.final_state.atoms)],
            "trace": self.trace.to_dict(),
        }


class _CountingPlanner:
    """Wraps a planner to count Tier-2 calls and collect malformed replies."""

    def __init__(self, inner: PlannerInterface | None):
        self.inner = inner
        self.calls = 0
        self.malformed: list[str] = []

    def propose_repair(self, request: RepairRequest) -> RepairAction | None:
        if self.inner is None:
            return None
        self.calls += 1
        action = self.inner.propose_repair(request)
        if request.malformed:
            self.malformed.append(request.failed_node)
        return action

    def synthesize_plan(self, goal: TaskGoal, registry: ToolRegistry) -> WorkflowDag | None:
        if self.inner is None:
            return None
        self.calls += 1
        return self.inner.synthesize_plan(goal, registry)


def diagnose(entry: HistoryEntry, node, env: SimEnvironment) -> FailureSignature:
    if entry.ok:
        raise NotAFailure(f"{entry.node_id} succeeded")
    code = entry.error_code if entry.status == "error" else QUALITY_ERROR
    return FailureSignature(node.tool_name, env.attrs_of(entry.dataset_id), code)


def select_repair(
    sig: FailureSignature,
    history: tuple[HistoryEntry, ...] | ExecutionTrace,
    dag: WorkflowDag,
    store: MemoryStore,
    planner: PlannerInterface | None,
    config: RunConfig,
    *,
    failed_node: str = "",
    registry: ToolRegistry | None = None,
    goal: TaskGoal | None = None,
) -> tuple[RepairAction, int] | None:
    """Tier 1 (memory) first, Tier 2 (planner) on a miss; None when both miss."""
    if not config.dynamic_adjustment:
        return None
    if config.tier1:
        action = query_repair(store, sig)
        if action is not None:
            return action, 1
    if config.tier2 and planner is not None:
        entries = history.history if isinstance(history, ExecutionTrace) else tuple(history)
        request = RepairRequest(sig, failed_node, dag, entries, tuple(registry.names()) if registry else (), goal)
        try:
            action = planner.propose_repair(request)
        except Exception as exc:  # planner is an external boundary; any failure is a miss
            log.warning("planner failed for %s: %s", sig, exc)
            action = None
        if action is not None:
            return action, 2
    return None


def apply_repair(dag: WorkflowDag, action: RepairAction, registry: ToolRegistry) -> WorkflowDag:
    """Apply a resolved graph action, keeping the result only if it validates."""
    if action.kind == "replace":
        new = replace_node(dag, action.target, action.new_node(dag))
    elif action.kind == "insert":
        new = insert_node(dag, action.predecessor, action.target, action.new_node(dag))
    elif action.kind == "modify":
        try:
            new = modify_params(dag, action.target, action.args, registry)
        except ArgKindMismatch as exc:
            raise RepairRejected(f"modify on {action.target}: {exc}") from exc
    else:
        raise RepairRejected(f"{action.kind} does not change the workflow")
    report = validate(new, registry)
    if not report.ok:
        raise RepairRejected(f"{action.describe()} leaves the workflow inconsistent", report)
    return new


def execute_workflow(
    dag: WorkflowDag,
    env: SimEnvironment,
    registry: ToolRegistry,
    store: MemoryStore,
    planner: PlannerInterface | None,
    config: RunConfig,
    *,
    goal: TaskGoal | None = None,
    trace_id: str = "trace-0001",
    template_id: str | None = None,
    _planner_wrapper: _CountingPlanner | None = None,
) -> RunResult:
    goal = goal or TaskGoal()
    counting = _planner_wrapper or _CountingPlanner(planner)
    w_init = dag
    history: list[HistoryEntry] = []
    adjustments: list[Adjustment] = []
    executed: set[str] = set()
    state = dag.initial_state
    per_node: Counter[str] = Counter()
    retries_granted = 0
    interactions = 0
    accepted = 0
    final_failure = None
    outcome = "success"

    while True:
        pending = [n for n in topological_order(dag) if n not in executed]
        if not pending:
            break
        nid = pending[0]
        node = dag.nodes[nid]
        entry = execute_tool(env, node, state, registry, dataset_id=env.dataset_for(dag, nid), seq=len(history) + 1)
        history.append(entry)
        if entry.ok:
            schema = bound_schema(node, registry)
            state = WorldState((state.atoms - schema.delete_effects) | entry.output_atoms)
            executed.add(nid)
            continue

        sig = diagnose(entry, node, env)
        retry = False
        cfg = config
        while config.dynamic_adjustment:
            if per_node[nid] >= config.max_repairs_per_node or retries_granted >= config.max_total_adjustments:
                break
            choice = select_repair(
                sig, tuple(history), dag, store, counting, cfg, failed_node=nid, registry=registry, goal=goal
            )
            if choice is None:
                break
            action, tier = choice
            per_node[nid] += 1
            if action.kind in ("abort", "none"):
                adjustments.append(Adjustment(entry.seq, nid, sig, action, tier, False, note=action.kind))
                break
            if action.kind == "ask_user":
                interactions += 1
                retries_granted += 1
                adjustments.append(Adjustment(entry.seq, nid, sig, action, tier, False, note="user consulted"))
                retry = True
                break
            try:
                applied = action.resolve(dag, nid, registry, goal.context)
                new_dag = apply_repair(dag, applied, registry)
            except KnowFlowError as exc:
                log.info("repair %s rejected at %s: %s", action.describe(), nid, exc)
                adjustments.append(Adjustment(entry.seq, nid, sig, action, tier, False, note=f"rejected: {exc}"))
                if tier == 1 and cfg.tier2:
                    cfg = dataclasses.replace(cfg, tier1=False)
                    continue
                break
            dag = new_dag
            accepted += 1
            retries_granted += 1
            adjustments.append(Adjustment(entry.seq, nid, sig, action, tier, True, applied))
            retry = True
            break
        if not retry:
            final_failure = sig
            outcome = "terminal_failure"
            break

    if outcome == "terminal_failure":
        interactions += 1
    trace = ExecutionTrace(
        trace_id,
        goal,
        w_init,
        tuple(history),
        tuple(adjustments),
        dag,
        outcome,
        final_failure,
        template_id,
        tuple(counting.malformed),
    )
    return RunResult(outcome, trace, len(history), counting.calls, interactions, accepted, state)


def _plan(goal, library, registry, planner: _CountingPlanner, config) -> tuple[WorkflowDag | None, str | None]:
    if config.workflow_library:
        if len(library):
            for tid, score in retrieve_template(goal, library):
                if score <= 0:
                    break
                try:
                    return instantiate(library[tid], goal, registry), tid
                except KnowFlowError as exc:
                    log.info("template %s not usable for this goal: %s", tid, exc)
        dag = planner.synthesize_plan(goal, registry)
        if dag is None:
            raise EmptyLibrary("no template matches the goal and the planner produced no workflow")
        return dag, None
    return planner.synthesize_plan(goal, registry), None


def run_task(
    goal: TaskGoal,
    library: TemplateLibrary,
    store: MemoryStore,
    env: SimEnvironment,
    registry: ToolRegistry,
    planner: PlannerInterface | None,
    config: RunConfig,
) -> tuple[RunResult, TemplateLibrary, MemoryStore]:
    """One full task: plan, execute with repair, then learn from the trace."""
    env = env.clone(seed=env.seed + config.seed)
    counting = _CountingPlanner(planner)
    trace_id = store.next_trace_id()
    dag, template_id = _plan(goal, library, registry, counting, config)

    if dag is None or not validate(dag, registry).ok:
        if dag is not None:
            log.info("synthesized workflow does not validate; task fails before execution")
        empty = dag or WorkflowDag()
        trace = ExecutionTrace(trace_id, goal, empty, (), (), empty, "terminal_failure", None, template_id)
        result = RunResult("terminal_failure", trace, 0, counting.calls, 1, 0, empty.initial_state)
    else:
        result = execute_workflow(
            dag,
            env,
            registry,
            store,
            planner,
            config,
            goal=goal,
            trace_id=trace_id,
            template_id=template_id,
            _planner_wrapper=counting,
        )
        result = dataclasses.replace(result, planner_calls=counting.calls)

    store = record_trace(store, result.trace)
    if config.learning:
        if result.outcome == "success" and result.adjustments:
            library = solidify(library, result.trace.w_final, result.trace)
            store = harvest_successful_repairs(store, result.trace)
        elif result.outcome == "terminal_failure":
            store = attribute_failure(store, result.trace)
    return result, library, store
