"""Procedural knowledge base: hierarchical workflow templates.

Templates are trees of steps; leaves name concrete tools and composite steps
group children. Instantiation flattens the leaves depth-first, fills ``?key``
placeholders from the task goal's context and infers dependency edges.
"""

from __future__ import annotations

import copy
import json
import os
import tempfile
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Iterable, Iterator, Mapping

from knowflow.actions import resolve_value
from knowflow.errors import (
    DuplicateNodeId,
    EmptyLibrary,
    InvalidInstantiation,
    KnowFlowError,
    Malformed,
    NotEligible,
    UnknownTool,
)
from knowflow.schema import ToolRegistry, WorldState, atoms_from_list, atoms_to_list, check_fields, load_json_text
from knowflow.workflow import WorkflowDag, WorkflowNode, infer_edges, topological_order, validate

if TYPE_CHECKING:
    from knowflow.memory import ExecutionTrace

PROVENANCES = ("expert", "solidified")
SOLIDIFIED_BONUS = 0.05


def normalize_tags(tags: Iterable[str]) -> frozenset[str]:
    return frozenset(t.strip().lower() for t in tags if t and t.strip())


@dataclass(frozen=True)
class TaskGoal:
    text: str = ""
    tags: frozenset[str] = frozenset()
    context: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "tags", normalize_tags(self.tags))
        object.__setattr__(self, "context", dict(self.context))

    def to_dict(self) -> dict:
        return {"text": self.text, "tags": sorted(self.tags), "context": copy.deepcopy(dict(self.context))}

    @classmethod
    def from_dict(cls, doc: Any, where: str = "goal") -> "TaskGoal":
        check_fields(doc, ("tags",), ("text", "context"), where)
        tags, context = doc["tags"], doc.get("context", {})
        if not isinstance(tags, list) or not all(isinstance(t, str) for t in tags):
            raise Malformed(f"{where}: tags must be a list of strings")
        if not isinstance(context, Mapping):
            raise Malformed(f"{where}: context must be an object")
        return cls(str(doc.get("text", "")), frozenset(tags), copy.deepcopy(dict(context)))


def load_goal(path) -> TaskGoal:
    with open(path, encoding="utf-8") as fh:
        return TaskGoal.from_dict(load_json_text(fh.read()))


@dataclass(frozen=True)
class TemplateStep:
    label: str
    tool_name: str | None = None
    arg_bindings: Mapping[str, Any] = field(default_factory=dict)
    children: tuple["TemplateStep", ...] = ()
    quality_threshold: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))
        object.__setattr__(self, "arg_bindings", dict(self.arg_bindings))
        if self.children and self.tool_name:
            raise Malformed(f"step {self.label!r}: composite steps cannot name a tool")
        if not self.children and not self.tool_name:
            raise Malformed(f"step {self.label!r}: leaf steps must name a tool")

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def leaves(self) -> Iterator["TemplateStep"]:
        if self.is_leaf:
            yield self
        for c in self.children:
            yield from c.leaves()

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"label": self.label}
        if self.tool_name is not None:
            d["tool_name"] = self.tool_name
        if self.arg_bindings:
            d["arg_bindings"] = copy.deepcopy(dict(self.arg_bindings))
        if self.children:
            d["children"] = [c.to_dict() for c in self.children]
        if self.quality_threshold is not None:
            d["quality_threshold"] = self.quality_threshold
        return d

    @classmethod
    def from_dict(cls, doc: Any, where: str = "step") -> "TemplateStep":
        check_fields(doc, ("label",), ("tool_name", "arg_bindings", "children", "quality_threshold"), where)
        children = doc.get("children", [])
        if not isinstance(children, list):
            raise Malformed(f"{where}: children must be a list")
        bindings = doc.get("arg_bindings", {})
        if not isinstance(bindings, Mapping):
            raise Malformed(f"{where}: arg_bindings must be an object")
        return cls(
            str(doc["label"]),
            doc.get("tool_name"),
            copy.deepcopy(dict(bindings)),
            tuple(cls.from_dict(c, f"{where}.children[{i}]") for i, c in enumerate(children)),
            doc.get("quality_threshold"),
        )


@dataclass(frozen=True)
class WorkflowTemplate:
    id: str
    tags: frozenset[str]
    steps: tuple[TemplateStep, ...]
    explicit_edges: frozenset[tuple[str, str]] = frozenset()
    provenance: str = "expert"
    metadata: Mapping[str, Any] = field(default_factory=dict)
    initial_state: WorldState = WorldState()

    def __post_init__(self):
        object.__setattr__(self, "tags", normalize_tags(self.tags))
        object.__setattr__(self, "steps", tuple(self.steps))
        object.__setattr__(self, "explicit_edges", frozenset(tuple(e) for e in self.explicit_edges))
        object.__setattr__(self, "metadata", dict(self.metadata))
        if self.provenance not in PROVENANCES:
            raise Malformed(f"template {self.id!r}: unknown provenance {self.provenance!r}")
        labels = [leaf.label for leaf in self.leaves()]
        if not labels:
            raise Malformed(f"template {self.id!r}: expands to no nodes")
        if len(set(labels)) != len(labels):
            raise Malformed(f"template {self.id!r}: duplicate leaf labels")
        for a, b in self.explicit_edges:
            if a not in labels or b not in labels:
                raise Malformed(f"template {self.id!r}: edge ({a}, {b}) names an unknown leaf label")

    def leaves(self) -> list[TemplateStep]:
        return [leaf for s in self.steps for leaf in s.leaves()]

    @property
    def signature_tags(self) -> frozenset[str]:
        return normalize_tags(self.metadata.get("source_tags", ()))

    def to_dict(self) -> dict:
        d: dict[str, Any] = {
            "id": self.id,
            "tags": sorted(self.tags),
            "steps": [s.to_dict() for s in self.steps],
            "explicit_edges": [list(e) for e in sorted(self.explicit_edges)],
            "provenance": self.provenance,
            "metadata": copy.deepcopy(dict(self.metadata)),
        }
        if self.initial_state.atoms:
            d["initial_state"] = atoms_to_list(self.initial_state.atoms)
        return d

    @classmethod
    def from_dict(cls, doc: Any, where: str = "template") -> "WorkflowTemplate":
        check_fields(doc, ("id", "tags", "steps"), ("explicit_edges", "provenance", "metadata", "initial_state"), where)
        if not isinstance(doc["steps"], list):
            raise Malformed(f"{where}: steps must be a list")
        edges = doc.get("explicit_edges", [])
        if not isinstance(edges, list) or not all(isinstance(e, list) and len(e) == 2 for e in edges):
            raise Malformed(f"{where}: explicit_edges must be a list of pairs")
        if not isinstance(doc["tags"], list):
            raise Malformed(f"{where}: tags must be a list")
        metadata = doc.get("metadata", {})
        if not isinstance(metadata, Mapping):
            raise Malformed(f"{where}: metadata must be an object")
        return cls(
            str(doc["id"]),
            frozenset(doc["tags"]),
            tuple(TemplateStep.from_dict(s, f"{where}.steps[{i}]") for i, s in enumerate(doc["steps"])),
            frozenset(tuple(e) for e in edges),
            doc.get("provenance", "expert"),
            copy.deepcopy(dict(metadata)),
            WorldState(atoms_from_list(doc.get("initial_state", []), f"{where}.initial_state")),
        )


class TemplateLibrary:
    """Immutable id -> template map; iteration sorted by id."""

    __slots__ = ("_templates",)

    def __init__(self, templates: Iterable[WorkflowTemplate] = ()):
        table: dict[str, WorkflowTemplate] = {}
        for t in templates:
            if t.id in table:
                raise Malformed(f"duplicate template id {t.id!r}")
            table[t.id] = t
        self._templates = dict(sorted(table.items()))

    def __getitem__(self, tid: str) -> WorkflowTemplate:
        return self._templates[tid]

    def __contains__(self, tid: object) -> bool:
        return tid in self._templates

    def __iter__(self) -> Iterator[WorkflowTemplate]:
        return iter(self._templates.values())

    def __len__(self) -> int:
        return len(self._templates)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, TemplateLibrary) and self._templates == other._templates

    def __repr__(self) -> str:
        return f"TemplateLibrary({list(self._templates)})"

    def add(self, template: WorkflowTemplate) -> "TemplateLibrary":
        return TemplateLibrary([*self, template])

    def to_list(self) -> list[dict]:
        return [t.to_dict() for t in self]

    @classmethod
    def from_list(cls, docs: Any) -> "TemplateLibrary":
        if not isinstance(docs, list):
            raise Malformed("template library file must hold a JSON array")
        return cls(WorkflowTemplate.from_dict(d, f"templates[{i}]") for i, d in enumerate(docs))


def load_library(path) -> TemplateLibrary:
    with open(path, encoding="utf-8") as fh:
        return TemplateLibrary.from_list(load_json_text(fh.read()))


def save_library(library: TemplateLibrary, path) -> None:
    """Write atomically: temp file in the same directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".library-", suffix=".json", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(library.to_list(), fh, indent=2)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def jaccard(a: frozenset[str], b: frozenset[str]) -> float:
    union = a | b
    return len(a & b) / len(union) if union else 0.0


def retrieve_template(goal: TaskGoal, library: TemplateLibrary) -> list[tuple[str, float]]:
    """Rank every template by tag overlap with the goal, best first."""
    if not len(library):
        raise EmptyLibrary("template library is empty")
    scored = []
    for t in library:
        score = jaccard(goal.tags, t.tags)
        if t.provenance == "solidified" and t.signature_tags and t.signature_tags <= goal.tags:
            score += SOLIDIFIED_BONUS
        scored.append((t.id, score))
    scored.sort(key=lambda p: (-p[1], p[0]))
    return scored


def instantiate(template: WorkflowTemplate, goal: TaskGoal, registry: ToolRegistry) -> WorkflowDag:
    nodes = []
    label_to_id = {}
    for k, leaf in enumerate(template.leaves(), start=1):
        if leaf.tool_name not in registry:
            raise UnknownTool(f"template {template.id!r} step {leaf.label!r}: unknown tool {leaf.tool_name!r}")
        nid = f"{template.id}.{k}"
        label_to_id[leaf.label] = nid
        args = {name: resolve_value(v, goal.context) for name, v in leaf.arg_bindings.items()}
        nodes.append(WorkflowNode(nid, leaf.tool_name, args, leaf.quality_threshold))
    edges = {(label_to_id[a], label_to_id[b]) for a, b in template.explicit_edges}
    edges |= infer_edges(nodes, registry)
    try:
        dag = WorkflowDag.build(nodes, edges, template.initial_state)
    except (DuplicateNodeId, KnowFlowError, Malformed) as exc:
        raise InvalidInstantiation(f"template {template.id!r}: {exc}") from exc
    report = validate(dag, registry)
    if not report.ok:
        raise InvalidInstantiation(f"template {template.id!r} does not validate", report)
    return dag


def _generalize(value: Any, context: Mapping[str, Any]) -> Any:
    for key in sorted(context):
        cval = context[key]
        if type(cval) is type(value) and cval == value:
            return f"?{key}"
    return copy.deepcopy(value)


def _repair_owned_args(trace: "ExecutionTrace") -> dict[str, dict[str, Any]]:
    """Args introduced by accepted repairs, keyed by node id, in proposal form."""
    owned: dict[str, dict[str, Any]] = {}
    for adj in trace.adjustments:
        if not adj.accepted or adj.applied is None:
            continue
        applied, raw = adj.applied, adj.action
        if applied.kind in ("insert", "replace"):
            if applied.kind == "replace":
                owned.pop(applied.target, None)
            owned[applied.node_id] = dict(raw.args)
        elif applied.kind == "modify":
            owned.setdefault(applied.target, {}).update(raw.args)
    return owned


def solidify(library: TemplateLibrary, final_dag: WorkflowDag, trace: "ExecutionTrace") -> TemplateLibrary:
    """Promote a repaired, successful workflow into a new template."""
    if trace.outcome != "success" or not any(a.accepted for a in trace.adjustments):
        raise NotEligible("only successful traces with at least one accepted adjustment are solidified")
    context = trace.goal.context
    owned = _repair_owned_args(trace)
    order = topological_order(final_dag)
    steps = []
    for nid in order:
        node = final_dag.nodes[nid]
        repaired = owned.get(nid, {})
        bindings = {}
        for name, value in node.args.items():
            bindings[name] = copy.deepcopy(repaired[name]) if name in repaired else _generalize(value, context)
        steps.append(TemplateStep(nid, node.tool_name, bindings, (), node.quality_threshold))
    edges = set(final_dag.edges) | set(zip(order, order[1:]))
    n = 1 + sum(1 for t in library if t.provenance == "solidified")
    tid = f"solidified-{n:03d}"
    while tid in library:
        n += 1
        tid = f"solidified-{n:03d}"
    signatures = [a.signature.to_dict() for a in trace.adjustments if a.accepted]
    metadata = {
        "source_trace": trace.trace_id,
        "source_template": trace.template_id,
        "source_tags": sorted(trace.goal.tags),
        "failure_signatures": signatures,
    }
    template = WorkflowTemplate(tid, trace.goal.tags, tuple(steps), frozenset(edges), "solidified", metadata, final_dag.initial_state)
    return library.add(template)
