"""Knowledge-guided workflow orchestration with self-healing repair and learning."""

from knowflow.actions import RepairAction
from knowflow.bench import BenchmarkCase, SuiteReport, compute_metrics, emit_report, load_suite, run_suite
from knowflow.executor import RunConfig, RunResult, execute_workflow, run_task
from knowflow.memory import MemoryStore, query_repair, read_jsonl
from knowflow.pkb import TaskGoal, TemplateLibrary, instantiate, load_library, retrieve_template, solidify
from knowflow.schema import PredicateAtom, ToolRegistry, ToolSchema, WorldState, load_registry
from knowflow.simenv import ScriptedPlanner, SimEnvironment, load_environment, load_planner_script
from knowflow.workflow import WorkflowDag, WorkflowNode, infer_edges, topological_order, validate

__version__ = "0.1.0"

__all__ = [
    "BenchmarkCase",
    "MemoryStore",
    "PredicateAtom",
    "RepairAction",
    "RunConfig",
    "RunResult",
    "ScriptedPlanner",
    "SimEnvironment",
    "SuiteReport",
    "TaskGoal",
    "TemplateLibrary",
    "ToolRegistry",
    "ToolSchema",
    "WorkflowDag",
    "WorkflowNode",
    "WorldState",
    "compute_metrics",
    "emit_report",
    "execute_workflow",
    "infer_edges",
    "instantiate",
    "load_environment",
    "load_library",
    "load_planner_script",
    "load_registry",
    "load_suite",
    "query_repair",
    "read_jsonl",
    "retrieve_template",
    "run_suite",
    "run_task",
    "solidify",
    "topological_order",
    "validate",
]
