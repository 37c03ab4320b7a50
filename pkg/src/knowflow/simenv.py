"""Deterministic simulated tool environment and Tier-2 planner implementations.

Failures are declared, not sampled: a :class:`FaultRule` fires when its tool,
dataset attributes and (optionally) node arguments match and its fire policy
allows it. ``until_atom`` faults stop firing once a step has established the
named atom, which is what makes insert-style repairs observable.
"""

from __future__ import annotations

import copy
import json
import logging
import os
import random
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Any, Mapping, Protocol, Sequence

from knowflow.actions import RepairAction, resolve_args
from knowflow.errors import KnowFlowError, Malformed, UnknownTool
from knowflow.memory import FailureSignature, HistoryEntry, SignaturePattern
from knowflow.pkb import TaskGoal, normalize_tags
from knowflow.schema import (
    PredicateAtom,
    ToolRegistry,
    WorldState,
    atoms_from_list,
    atoms_to_list,
    check_fields,
    load_json_text,
)
from knowflow.workflow import WorkflowDag, WorkflowNode, topological_order

log = logging.getLogger(__name__)

PLANNER_URL_ENV = "KNOWFLOW_PLANNER_URL"
PRECONDITION_ERROR = "precondition_violated"


@dataclass(frozen=True)
class DatasetDescriptor:
    id: str
    attrs: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "attrs", dict(self.attrs))

    def to_dict(self) -> dict:
        return {"id": self.id, "attrs": dict(sorted(self.attrs.items()))}

    @classmethod
    def from_dict(cls, doc: Any, where: str = "dataset") -> "DatasetDescriptor":
        check_fields(doc, ("id",), ("attrs",), where)
        return cls(doc["id"], dict(doc.get("attrs", {})))


@dataclass(frozen=True)
class FirePolicy:
    kind: str = "always"
    n: int = 0
    atom: PredicateAtom | None = None

    def __post_init__(self):
        if self.kind not in ("always", "first_n", "until_atom"):
            raise Malformed(f"unknown fire policy {self.kind!r}")
        if self.kind == "first_n" and self.n < 0:
            raise Malformed("first_n needs a nonnegative count")
        if self.kind == "until_atom" and self.atom is None:
            raise Malformed("until_atom needs an atom")

    def to_dict(self) -> dict:
        if self.kind == "first_n":
            return {"kind": "first_n", "n": self.n}
        if self.kind == "until_atom":
            return {"kind": "until_atom", "atom": self.atom.to_dict()}
        return {"kind": "always"}

    @classmethod
    def from_dict(cls, doc: Any, where: str = "fire_policy") -> "FirePolicy":
        if isinstance(doc, str):
            doc = {"kind": doc}
        check_fields(doc, ("kind",), ("n", "atom"), where)
        atom = PredicateAtom.from_dict(doc["atom"], f"{where}.atom") if doc.get("atom") is not None else None
        return cls(doc["kind"], int(doc.get("n", 0)), atom)


@dataclass(frozen=True)
class FaultRule:
    tool_name: str | None
    error_code: str
    attr_match: Mapping[str, Any] = field(default_factory=dict)
    fire_policy: FirePolicy = FirePolicy()
    arg_match: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.error_code:
            raise Malformed("fault rule needs an error code")
        object.__setattr__(self, "attr_match", dict(self.attr_match))
        object.__setattr__(self, "arg_match", dict(self.arg_match))

    def matches(self, tool_name: str, attrs: Mapping[str, Any], args: Mapping[str, Any]) -> bool:
        if self.tool_name is not None and self.tool_name != tool_name:
            return False
        if any(attrs.get(k, _MISSING) != v for k, v in self.attr_match.items()):
            return False
        return all(args.get(k, _MISSING) == v for k, v in self.arg_match.items())

    def to_dict(self) -> dict:
        d: dict[str, Any] = {
            "tool_name": self.tool_name if self.tool_name is not None else "*",
            "attr_match": dict(sorted(self.attr_match.items())),
            "error_code": self.error_code,
            "fire_policy": self.fire_policy.to_dict(),
        }
        if self.arg_match:
            d["arg_match"] = dict(sorted(self.arg_match.items()))
        return d

    @classmethod
    def from_dict(cls, doc: Any, where: str = "fault") -> "FaultRule":
        check_fields(doc, ("tool_name", "error_code"), ("attr_match", "fire_policy", "arg_match"), where)
        tool = doc["tool_name"]
        return cls(
            None if tool in (None, "*") else tool,
            doc["error_code"],
            dict(doc.get("attr_match", {})),
            FirePolicy.from_dict(doc.get("fire_policy", "always"), f"{where}.fire_policy"),
            dict(doc.get("arg_match", {})),
        )


_MISSING = object()


@dataclass(frozen=True)
class QualityAdjust:
    delta: float
    when_attrs: Mapping[str, Any] = field(default_factory=dict)
    when_args: Mapping[str, Any] = field(default_factory=dict)

    def applies(self, attrs: Mapping[str, Any], args: Mapping[str, Any]) -> bool:
        return all(attrs.get(k, _MISSING) == v for k, v in self.when_attrs.items()) and all(
            args.get(k, _MISSING) == v for k, v in self.when_args.items()
        )

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"delta": self.delta}
        if self.when_attrs:
            d["when_attrs"] = dict(sorted(self.when_attrs.items()))
        if self.when_args:
            d["when_args"] = dict(sorted(self.when_args.items()))
        return d

    @classmethod
    def from_dict(cls, doc: Any, where: str = "adjust") -> "QualityAdjust":
        check_fields(doc, ("delta",), ("when_attrs", "when_args"), where)
        return cls(float(doc["delta"]), dict(doc.get("when_attrs", {})), dict(doc.get("when_args", {})))


@dataclass(frozen=True)
class ToolBehavior:
    emits: frozenset[PredicateAtom] = frozenset()
    base_quality: float = 1.0
    adjust: tuple[QualityAdjust, ...] = ()

    def quality(self, attrs: Mapping[str, Any], args: Mapping[str, Any]) -> float:
        q = self.base_quality + sum(a.delta for a in self.adjust if a.applies(attrs, args))
        return round(min(1.0, max(0.0, q)), 9)

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"quality": {"base": self.base_quality, "adjust": [a.to_dict() for a in self.adjust]}}
        if self.emits:
            d["emits"] = atoms_to_list(self.emits)
        return d

    @classmethod
    def from_dict(cls, doc: Any, where: str = "behavior") -> "ToolBehavior":
        check_fields(doc, (), ("emits", "quality"), where)
        q = doc.get("quality", {})
        check_fields(q, (), ("base", "adjust"), f"{where}.quality")
        return cls(
            atoms_from_list(doc.get("emits", []), f"{where}.emits"),
            float(q.get("base", 1.0)),
            tuple(QualityAdjust.from_dict(a, f"{where}.quality.adjust[{i}]") for i, a in enumerate(q.get("adjust", []))),
        )


DEFAULT_BEHAVIOR = ToolBehavior()


class SimEnvironment:
    """Datasets, fault rules and per-tool behaviour, plus per-run fire counters.

    One instance serves one run; :meth:`clone` gives an independent copy with
    fresh counters.
    """

    def __init__(
        self,
        datasets: Sequence[DatasetDescriptor] = (),
        faults: Sequence[FaultRule] = (),
        tool_behaviors: Mapping[str, ToolBehavior] | None = None,
        seed: int = 0,
        default_dataset: str | None = None,
        quality_noise: float = 0.0,
    ):
        ids = [d.id for d in datasets]
        if len(set(ids)) != len(ids):
            raise Malformed("dataset ids must be unique")
        if default_dataset is not None and default_dataset not in ids:
            raise Malformed(f"default dataset {default_dataset!r} is not declared")
        self.datasets = {d.id: d for d in datasets}
        self.faults = tuple(faults)
        self.tool_behaviors = dict(sorted((tool_behaviors or {}).items()))
        self.seed = seed
        self.default_dataset = default_dataset
        self.quality_noise = quality_noise
        self._fired = [0] * len(self.faults)
        self._calls = 0

    def clone(self, seed: int | None = None) -> "SimEnvironment":
        return SimEnvironment(
            list(self.datasets.values()),
            self.faults,
            self.tool_behaviors,
            self.seed if seed is None else seed,
            self.default_dataset,
            self.quality_noise,
        )

    def __eq__(self, other: object) -> bool:
        return isinstance(other, SimEnvironment) and self.to_dict() == other.to_dict()

    def attrs_of(self, dataset_id: str | None) -> dict[str, Any]:
        if dataset_id is None or dataset_id not in self.datasets:
            return {}
        return dict(self.datasets[dataset_id].attrs)

    def behavior(self, tool_name: str) -> ToolBehavior:
        return self.tool_behaviors.get(tool_name, DEFAULT_BEHAVIOR)

    def dataset_for(self, dag: WorkflowDag, node_id: str) -> str | None:
        """The input dataset of a node: its own path args, then its nearest ancestors."""
        own = self._match_args(dag.nodes[node_id].args)
        if own is not None:
            return own
        ancestors = dag.ancestors(node_id)
        try:
            order = topological_order(dag)
        except KnowFlowError:
            order = sorted(dag.nodes)
        for anc in reversed(order):
            if anc in ancestors:
                found = self._match_args(dag.nodes[anc].args)
                if found is not None:
                    return found
        if self.default_dataset is not None:
            return self.default_dataset
        if len(self.datasets) == 1:
            return next(iter(self.datasets))
        return None

    def _match_args(self, args: Mapping[str, Any]) -> str | None:
        for name in sorted(args):
            v = args[name]
            if isinstance(v, str) and v in self.datasets:
                return v
        return None

    def to_dict(self) -> dict:
        d: dict[str, Any] = {
            "datasets": [ds.to_dict() for ds in self.datasets.values()],
            "faults": [f.to_dict() for f in self.faults],
            "tool_behaviors": {k: b.to_dict() for k, b in self.tool_behaviors.items()},
            "seed": self.seed,
        }
        if self.default_dataset is not None:
            d["default_dataset"] = self.default_dataset
        if self.quality_noise:
            d["quality_noise"] = self.quality_noise
        return d

    @classmethod
    def from_dict(cls, doc: Any, where: str = "environment") -> "SimEnvironment":
        check_fields(doc, (), ("datasets", "faults", "tool_behaviors", "seed", "default_dataset", "quality_noise"), where)
        behaviors = doc.get("tool_behaviors", {})
        if not isinstance(behaviors, Mapping):
            raise Malformed(f"{where}: tool_behaviors must be an object")
        return cls(
            [DatasetDescriptor.from_dict(d, f"{where}.datasets[{i}]") for i, d in enumerate(doc.get("datasets", []))],
            [FaultRule.from_dict(f, f"{where}.faults[{i}]") for i, f in enumerate(doc.get("faults", []))],
            {k: ToolBehavior.from_dict(b, f"{where}.tool_behaviors.{k}") for k, b in behaviors.items()},
            int(doc.get("seed", 0)),
            doc.get("default_dataset"),
            float(doc.get("quality_noise", 0.0)),
        )


def load_environment(path) -> SimEnvironment:
    with open(path, encoding="utf-8") as fh:
        return SimEnvironment.from_dict(load_json_text(fh.read()))


def execute_tool(
    env: SimEnvironment,
    node: WorkflowNode,
    state: WorldState,
    registry: ToolRegistry,
    *,
    dataset_id: str | None = None,
    seq: int = 0,
) -> HistoryEntry:
    """Simulate one tool invocation against ``state``."""
    if node.tool_name not in registry:
        raise UnknownTool(f"unknown tool {node.tool_name!r}")
    schema = registry[node.tool_name].bind(node.args)
    env._calls += 1
    attrs = env.attrs_of(dataset_id)
    entry = dict(seq=seq, node_id=node.id, tool_name=node.tool_name, args=node.args, dataset_id=dataset_id)

    if not schema.preconditions <= state.atoms:
        return HistoryEntry(status="error", error_code=PRECONDITION_ERROR, **entry)

    for i, fault in enumerate(env.faults):
        if not fault.matches(node.tool_name, attrs, node.args):
            continue
        policy = fault.fire_policy
        if policy.kind == "first_n" and env._fired[i] >= policy.n:
            continue
        if policy.kind == "until_atom" and policy.atom in state.atoms:
            continue
        env._fired[i] += 1
        return HistoryEntry(status="error", error_code=fault.error_code, **entry)

    behavior = env.behavior(node.tool_name)
    score = behavior.quality(attrs, node.args)
    if env.quality_noise:
        rng = random.Random(f"{env.seed}:{node.tool_name}:{env._calls}")
        score = round(min(1.0, max(0.0, score + rng.uniform(-env.quality_noise, env.quality_noise))), 9)
    if node.quality_threshold is not None and score < node.quality_threshold:
        return HistoryEntry(status="quality_fail", score=score, **entry)
    return HistoryEntry(status="success", score=score, output_atoms=schema.add_effects | behavior.emits, **entry)


@dataclass
class RepairRequest:
    """Context handed to a Tier-2 planner.

    A planner that receives an unusable response sets ``malformed`` so the
    step can be marked as an instruction-following failure.
    """

    signature: FailureSignature
    failed_node: str
    workflow: WorkflowDag
    history: tuple[HistoryEntry, ...] = ()
    tools: tuple[str, ...] = ()
    goal: TaskGoal | None = None
    malformed: bool = False

    def to_wire(self) -> dict:
        return {
            "history": [h.to_dict() for h in self.history],
            "workflow": self.workflow.to_dict(),
            "tools": list(self.tools),
            "signature": self.signature.to_dict(),
        }


class PlannerInterface(Protocol):
    def propose_repair(self, request: RepairRequest) -> RepairAction | None: ...

    def synthesize_plan(self, goal: TaskGoal, registry: ToolRegistry) -> WorkflowDag | None: ...


class NullPlanner:
    """A planner that never has an answer."""

    def propose_repair(self, request: RepairRequest) -> RepairAction | None:
        return None

    def synthesize_plan(self, goal: TaskGoal, registry: ToolRegistry) -> WorkflowDag | None:
        return None


class ScriptedPlanner:
    """Deterministic Tier-2 stand-in driven by an ordered script.

    The first repair entry whose pattern matches the failure signature wins;
    the first plan entry whose tags are all present in the goal wins.
    """

    def __init__(
        self,
        repairs: Sequence[tuple[SignaturePattern, RepairAction]] = (),
        plans: Sequence[tuple[frozenset[str], Mapping[str, Any]]] = (),
    ):
        self.repairs = tuple(repairs)
        self.plans = tuple((normalize_tags(tags), copy.deepcopy(dict(doc))) for tags, doc in plans)

    def propose_repair(self, request: RepairRequest) -> RepairAction | None:
        for pattern, action in self.repairs:
            if pattern.matches(request.signature):
                return action
        return None

    def synthesize_plan(self, goal: TaskGoal, registry: ToolRegistry) -> WorkflowDag | None:
        for tags, doc in self.plans:
            if tags <= goal.tags:
                try:
                    return _bind_workflow_doc(doc, goal.context)
                except KnowFlowError as exc:
                    log.warning("scripted plan for %s unusable: %s", sorted(tags), exc)
                    return None
        return None

    def to_dict(self) -> dict:
        return {
            "repairs": [{"pattern": p.to_dict(), "action": a.to_dict()} for p, a in self.repairs],
            "plans": [{"tags": sorted(t), "workflow": copy.deepcopy(d)} for t, d in self.plans],
        }

    @classmethod
    def from_dict(cls, doc: Any, where: str = "planner script") -> "ScriptedPlanner":
        check_fields(doc, (), ("repairs", "plans"), where)
        repairs = []
        for i, r in enumerate(doc.get("repairs", [])):
            check_fields(r, ("pattern", "action"), (), f"{where}.repairs[{i}]")
            repairs.append(
                (SignaturePattern.from_dict(r["pattern"]), RepairAction.from_dict(r["action"], f"{where}.repairs[{i}].action"))
            )
        plans = []
        for i, p in enumerate(doc.get("plans", [])):
            check_fields(p, ("tags", "workflow"), (), f"{where}.plans[{i}]")
            WorkflowDag.from_dict(p["workflow"], f"{where}.plans[{i}].workflow")
            plans.append((frozenset(p["tags"]), p["workflow"]))
        return cls(repairs, plans)


def scripted_planner(script: Sequence[tuple[SignaturePattern, RepairAction]] | Mapping[str, Any] = ()) -> ScriptedPlanner:
    if isinstance(script, Mapping):
        return ScriptedPlanner.from_dict(script)
    return ScriptedPlanner(script)


def load_planner_script(path) -> ScriptedPlanner:
    with open(path, encoding="utf-8") as fh:
        return ScriptedPlanner.from_dict(load_json_text(fh.read()))


def _bind_workflow_doc(doc: Mapping[str, Any], context: Mapping[str, Any]) -> WorkflowDag:
    doc = copy.deepcopy(dict(doc))
    for n in doc.get("nodes", []):
        if "args" in n:
            n["args"] = resolve_args(n["args"], context)
    return WorkflowDag.from_dict(doc)


class RemotePlanner:
    """HTTP bridge to an external planner (e.g. an LLM service).

    Every transport or decoding problem degrades to a Tier-2 miss.
    """

    def __init__(self, url: str, timeout: float = 30.0):
        self.url = url
        self.timeout = timeout

    def _post(self, url: str, payload: Mapping[str, Any]) -> Any:
        req = urllib.request.Request(
            url,
            data=json.dumps(payload).encode("utf-8"),
            headers={"Content-Type": "application/json"},
            method="POST",
        )
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return json.loads(resp.read().decode("utf-8"))

    def propose_repair(self, request: RepairRequest) -> RepairAction | None:
        try:
            body = self._post(self.url, request.to_wire())
        except (urllib.error.URLError, OSError, TimeoutError) as exc:
            log.warning("remote planner unreachable: %s", exc)
            return None
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            log.warning("remote planner sent non-JSON: %s", exc)
            request.malformed = True
            return None
        try:
            return RepairAction.from_dict(body, "planner response")
        except KnowFlowError as exc:
            log.warning("remote planner response rejected: %s", exc)
            request.malformed = True
            return None

    def synthesize_plan(self, goal: TaskGoal, registry: ToolRegistry) -> WorkflowDag | None:
        try:
            body = self._post(self.url.rstrip("/") + "/plan", {"goal": goal.to_dict(), "tools": registry.names()})
            return WorkflowDag.from_dict(body, "planner plan")
        except (urllib.error.URLError, OSError, TimeoutError, ValueError, KnowFlowError) as exc:
            log.warning("remote planner could not synthesize a plan: %s", exc)
            return None


def remote_planner(url: str | None = None, timeout: float = 30.0) -> RemotePlanner | None:
    url = url or os.environ.get(PLANNER_URL_ENV)
    return RemotePlanner(url, timeout) if url else None
