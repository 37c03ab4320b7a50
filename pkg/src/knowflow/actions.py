"""Repair actions and their resolution against a concrete failing node.

Actions are stored in rules and planner scripts in a *relative* form: when
``target`` is omitted the action applies to whatever node failed, and an
insert without ``predecessor`` picks one of the failing node's inputs. The
executor turns a relative action into a concrete one with :meth:`resolve`.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Any, Mapping

from knowflow.errors import Malformed, NoSuchEdge, NoSuchNode, UnboundContextKey
from knowflow.schema import ToolRegistry, check_fields
from knowflow.workflow import WorkflowDag, WorkflowNode, bound_schema, topological_order

ACTION_KINDS = ("replace", "insert", "modify", "abort", "ask_user", "none")
GRAPH_KINDS = ("replace", "insert", "modify")


def resolve_value(value: Any, context: Mapping[str, Any]) -> Any:
    if isinstance(value, str) and value.startswith("?"):
        key = value[1:]
        if key not in context:
            raise UnboundContextKey(key)
        return copy.deepcopy(context[key])
    return copy.deepcopy(value)


def resolve_args(args: Mapping[str, Any], context: Mapping[str, Any]) -> dict[str, Any]:
    return {k: resolve_value(v, context) for k, v in args.items()}


@dataclass(frozen=True)
class RepairAction:
    kind: str
    tool_name: str | None = None
    args: Mapping[str, Any] = field(default_factory=dict)
    target: str | None = None
    predecessor: str | None = None
    node_id: str | None = None
    message: str | None = None

    def __post_init__(self):
        if self.kind not in ACTION_KINDS:
            raise Malformed(f"unknown repair kind {self.kind!r}")
        if self.kind in ("replace", "insert") and not self.tool_name:
            raise Malformed(f"{self.kind} action needs a tool_name")
        object.__setattr__(self, "args", dict(self.args))

    @classmethod
    def insert(cls, tool_name: str, args: Mapping[str, Any] | None = None, **kw) -> "RepairAction":
        return cls("insert", tool_name, dict(args or {}), **kw)

    @classmethod
    def replace(cls, tool_name: str, args: Mapping[str, Any] | None = None, **kw) -> "RepairAction":
        return cls("replace", tool_name, dict(args or {}), **kw)

    @classmethod
    def modify(cls, args: Mapping[str, Any], **kw) -> "RepairAction":
        return cls("modify", None, dict(args), **kw)

    @property
    def changes_graph(self) -> bool:
        return self.kind in GRAPH_KINDS

    def key(self) -> tuple:
        """Identity used for rule dedup and avoid matching (ids excluded)."""
        return (self.kind, self.tool_name, json.dumps(self.args, sort_keys=True, default=str))

    def generic(self) -> "RepairAction":
        """Drop concrete node references so the action can be reused elsewhere."""
        return RepairAction(self.kind, self.tool_name, self.args, message=self.message)

    def describe(self) -> str:
        if self.kind in ("insert", "replace"):
            return f"{self.kind}_tool({self.tool_name!r})"
        if self.kind == "modify":
            return "modify_params(" + ", ".join(f"{k}={v!r}" for k, v in sorted(self.args.items())) + ")"
        if self.kind == "ask_user":
            return f"ask_user({self.message or ''!r})"
        return self.kind

    def resolve(
        self,
        dag: WorkflowDag,
        failed: str,
        registry: ToolRegistry,
        context: Mapping[str, Any] | None = None,
    ) -> "RepairAction":
        """Bind a relative action to ``failed`` in ``dag``.

        ``?key`` argument values are filled from ``context``. For modify the
        given args are merged over the node's current args.
        """
        if not self.changes_graph:
            return self
        context = context or {}
        target = self.target or failed
        if target not in dag.nodes:
            raise NoSuchNode(f"no node {target!r}")
        node = dag.nodes[target]
        args = resolve_args(self.args, context)
        if self.kind == "modify":
            merged = dict(node.args)
            merged.update(args)
            return RepairAction("modify", None, merged, target=target, message=self.message)
        if self.kind == "replace":
            nid = self.node_id or target
            return RepairAction("replace", self.tool_name, args, target=target, node_id=nid, message=self.message)
        pred = self.predecessor or _pick_predecessor(dag, target, self.tool_name, args, registry)
        nid = self.node_id or _fresh_id(dag, f"{self.tool_name}@{target}")
        return RepairAction(
            "insert", self.tool_name, args, target=target, predecessor=pred, node_id=nid, message=self.message
        )

    def new_node(self, dag: WorkflowDag) -> WorkflowNode:
        """The node an already-resolved replace/insert introduces."""
        thr = None
        if self.kind == "replace" and self.target in dag.nodes:
            thr = dag.nodes[self.target].quality_threshold
        return WorkflowNode(self.node_id or "", self.tool_name or "", dict(self.args), thr)

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"kind": self.kind}
        if self.tool_name is not None:
            d["tool_name"] = self.tool_name
        if self.args:
            d["args"] = copy.deepcopy(dict(self.args))
        for attr in ("target", "predecessor", "node_id", "message"):
            val = getattr(self, attr)
            if val is not None:
                d[attr] = val
        return d

    @classmethod
    def from_dict(cls, doc: Any, where: str = "action") -> "RepairAction":
        check_fields(doc, ("kind",), ("tool_name", "args", "target", "predecessor", "node_id", "message"), where)
        args = doc.get("args", {})
        if not isinstance(args, Mapping):
            raise Malformed(f"{where}: args must be an object")
        for attr in ("tool_name", "target", "predecessor", "node_id", "message"):
            if doc.get(attr) is not None and not isinstance(doc[attr], str):
                raise Malformed(f"{where}: {attr} must be a string")
        return cls(
            doc["kind"],
            doc.get("tool_name"),
            copy.deepcopy(dict(args)),
            doc.get("target"),
            doc.get("predecessor"),
            doc.get("node_id"),
            doc.get("message"),
        )


def _fresh_id(dag: WorkflowDag, base: str) -> str:
    if base not in dag.nodes:
        return base
    k = 2
    while f"{base}#{k}" in dag.nodes:
        k += 1
    return f"{base}#{k}"


def _pick_predecessor(dag: WorkflowDag, target: str, tool_name: str, args: Mapping[str, Any], registry: ToolRegistry) -> str:
    preds = dag.predecessors(target)
    if not preds:
        raise NoSuchEdge(f"{target!r} has no predecessor to insert after")
    try:
        order = {n: i for i, n in enumerate(topological_order(dag))}
    except Exception:
        order = {n: i for i, n in enumerate(sorted(dag.nodes))}
    preds.sort(key=lambda n: order[n])
    tool = registry.get(tool_name)
    if tool is not None:
        try:
            needs = tool.bind(args).preconditions
        except Exception:
            needs = frozenset()
        feeding = []
        for p in preds:
            try:
                if bound_schema(dag.nodes[p], registry).add_effects & needs:
                    feeding.append(p)
            except Exception:
                continue
        if feeding:
            return feeding[-1]
    return preds[-1]
