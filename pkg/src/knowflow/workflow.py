"""Workflow DAGs: edge inference, validation, canonical ordering and repair operators.

All DAG values are treated as immutable; the operators return fresh DAGs and
never touch their input.
"""

from __future__ import annotations

import copy
import heapq
import json
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

from knowflow.errors import (
    ArgKindMismatch,
    CycleDetected,
    DuplicateNodeId,
    KnowFlowError,
    Malformed,
    NoSuchEdge,
    NoSuchNode,
    UnknownTool,
)
from knowflow.schema import (
    PredicateAtom,
    ToolRegistry,
    ToolSchema,
    WorldState,
    atoms_from_list,
    atoms_to_list,
    check_fields,
    load_json_text,
)

Edge = tuple[str, str]


@dataclass(frozen=True)
class WorkflowNode:
    id: str
    tool_name: str
    args: Mapping[str, Any] = field(default_factory=dict)
    quality_threshold: float | None = None

    def __post_init__(self):
        if not self.id:
            raise Malformed("node id must be nonempty")
        object.__setattr__(self, "args", dict(self.args))
        q = self.quality_threshold
        if q is not None and not (0.0 <= q <= 1.0):
            raise Malformed(f"node {self.id!r}: quality_threshold must lie in [0, 1]")

    def with_args(self, args: Mapping[str, Any]) -> "WorkflowNode":
        return WorkflowNode(self.id, self.tool_name, dict(args), self.quality_threshold)

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"id": self.id, "tool_name": self.tool_name, "args": copy.deepcopy(dict(self.args))}
        if self.quality_threshold is not None:
            d["quality_threshold"] = self.quality_threshold
        return d

    @classmethod
    def from_dict(cls, doc: Any, where: str = "node") -> "WorkflowNode":
        check_fields(doc, ("id", "tool_name"), ("args", "quality_threshold"), where)
        args = doc.get("args", {})
        if not isinstance(args, Mapping):
            raise Malformed(f"{where}: args must be an object")
        q = doc.get("quality_threshold")
        if q is not None and (isinstance(q, bool) or not isinstance(q, (int, float))):
            raise Malformed(f"{where}: quality_threshold must be a number")
        if not isinstance(doc["id"], str) or not isinstance(doc["tool_name"], str):
            raise Malformed(f"{where}: id and tool_name must be strings")
        return cls(doc["id"], doc["tool_name"], copy.deepcopy(dict(args)), q)


@dataclass(frozen=True)
class WorkflowDag:
    """W = (V, E) plus the world state execution starts from.

    Acyclicity is *not* enforced on construction so that cyclic inputs can be
    represented and reported by :func:`validate`.
    """

    nodes: Mapping[str, WorkflowNode] = field(default_factory=dict)
    edges: frozenset[Edge] = frozenset()
    initial_state: WorldState = WorldState()

    def __post_init__(self):
        nodes = dict(sorted(self.nodes.items()))
        for key, n in nodes.items():
            if key != n.id:
                raise Malformed(f"node keyed {key!r} has id {n.id!r}")
        edges = frozenset((str(a), str(b)) for a, b in self.edges)
        for a, b in edges:
            if a == b:
                raise Malformed(f"self-edge on {a!r}")
            for end in (a, b):
                if end not in nodes:
                    raise NoSuchNode(f"edge ({a}, {b}) references unknown node {end!r}")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", edges)
        if not isinstance(self.initial_state, WorldState):
            object.__setattr__(self, "initial_state", WorldState(frozenset(self.initial_state)))

    @classmethod
    def build(cls, nodes: Iterable[WorkflowNode], edges: Iterable[Edge] = (), initial_state=()) -> "WorkflowDag":
        table: dict[str, WorkflowNode] = {}
        for n in nodes:
            if n.id in table:
                raise DuplicateNodeId(f"duplicate node id {n.id!r}")
            table[n.id] = n
        state = initial_state if isinstance(initial_state, WorldState) else WorldState.of(*initial_state)
        return cls(table, frozenset(edges), state)

    def predecessors(self, node_id: str) -> list[str]:
        return sorted(a for a, b in self.edges if b == node_id)

    def successors(self, node_id: str) -> list[str]:
        return sorted(b for a, b in self.edges if a == node_id)

    def ancestors(self, node_id: str) -> set[str]:
        preds: dict[str, list[str]] = {n: [] for n in self.nodes}
        for a, b in self.edges:
            preds[b].append(a)
        seen: set[str] = set()
        stack = list(preds[node_id])
        while stack:
            cur = stack.pop()
            if cur not in seen:
                seen.add(cur)
                stack.extend(preds[cur])
        return seen

    def to_dict(self) -> dict:
        return {
            "initial_state": atoms_to_list(self.initial_state.atoms),
            "nodes": [n.to_dict() for n in self.nodes.values()],
            "edges": [list(e) for e in sorted(self.edges)],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, doc: Any, where: str = "workflow") -> "WorkflowDag":
        check_fields(doc, ("nodes",), ("initial_state", "edges"), where)
        if not isinstance(doc["nodes"], list):
            raise Malformed(f"{where}: nodes must be a list")
        nodes = [WorkflowNode.from_dict(n, f"{where}.nodes[{i}]") for i, n in enumerate(doc["nodes"])]
        edges = doc.get("edges", [])
        if not isinstance(edges, list) or not all(
            isinstance(e, list) and len(e) == 2 and all(isinstance(x, str) for x in e) for e in edges
        ):
            raise Malformed(f"{where}: edges must be a list of [from, to] string pairs")
        state = WorldState(atoms_from_list(doc.get("initial_state", []), f"{where}.initial_state"))
        try:
            return cls.build(nodes, [tuple(e) for e in edges], state)
        except (NoSuchNode, DuplicateNodeId) as exc:
            raise Malformed(f"{where}: {exc}") from exc


def load_workflow(path) -> WorkflowDag:
    with open(path, encoding="utf-8") as fh:
        return WorkflowDag.from_dict(load_json_text(fh.read()))


def bound_schema(node: WorkflowNode, registry: ToolRegistry) -> ToolSchema:
    """The node's tool schema with placeholders grounded from its args."""
    return registry[node.tool_name].bind(node.args)


def infer_edges(nodes: Iterable[WorkflowNode], registry: ToolRegistry) -> frozenset[Edge]:
    """Edge (i, j) iff some add-effect of i is a precondition of j."""
    nodes = sorted(nodes, key=lambda n: n.id)
    schemas = {n.id: bound_schema(n, registry) for n in nodes}
    # index preconditions by atom so the pass is linear in matches, not pairs
    needs: dict[PredicateAtom, list[str]] = {}
    for n in nodes:
        for atom in schemas[n.id].preconditions:
            needs.setdefault(atom, []).append(n.id)
    edges = set()
    for n in nodes:
        for atom in schemas[n.id].add_effects:
            for consumer in needs.get(atom, ()):
                if consumer != n.id:
                    edges.add((n.id, consumer))
    return frozenset(edges)


def find_cycle(dag: WorkflowDag) -> list[str] | None:
    """Return one cycle as a node list, or None when the graph is acyclic."""
    succ: dict[str, list[str]] = {n: [] for n in dag.nodes}
    for a, b in sorted(dag.edges):
        succ[a].append(b)
    color = dict.fromkeys(dag.nodes, 0)
    for root in dag.nodes:
        if color[root]:
            continue
        stack = [(root, iter(succ[root]))]
        path = [root]
        color[root] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                color[node] = 2
                stack.pop()
                path.pop()
            elif color[nxt] == 1:
                return path[path.index(nxt):] + [nxt]
            elif color[nxt] == 0:
                color[nxt] = 1
                stack.append((nxt, iter(succ[nxt])))
                path.append(nxt)
    return None


def topological_order(dag: WorkflowDag) -> list[str]:
    """Kahn's algorithm with a min-id frontier: the lexicographically smallest order."""
    indeg = dict.fromkeys(dag.nodes, 0)
    succ: dict[str, list[str]] = {n: [] for n in dag.nodes}
    for a, b in dag.edges:
        succ[a].append(b)
        indeg[b] += 1
    frontier = [n for n, d in indeg.items() if d == 0]
    heapq.heapify(frontier)
    order = []
    while frontier:
        cur = heapq.heappop(frontier)
        order.append(cur)
        for nxt in succ[cur]:
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                heapq.heappush(frontier, nxt)
    if len(order) != len(dag.nodes):
        cycle = find_cycle(dag)
        raise CycleDetected("cycle detected: " + " -> ".join(cycle or sorted(set(dag.nodes) - set(order))))
    return order


@dataclass(frozen=True)
class ValidationReport:
    acyclic: bool
    unsatisfied: tuple[tuple[str, PredicateAtom], ...] = ()
    arg_errors: tuple[tuple[str, str, str], ...] = ()
    warnings: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return self.acyclic and not self.unsatisfied and not self.arg_errors

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "acyclic": self.acyclic,
            "unsatisfied": [{"node": n, "atom": a.to_dict()} for n, a in self.unsatisfied],
            "arg_errors": [{"node": n, "param": p, "reason": r} for n, p, r in self.arg_errors],
            "warnings": list(self.warnings),
        }


def validate(dag: WorkflowDag, registry: ToolRegistry) -> ValidationReport:
    arg_errors: list[tuple[str, str, str]] = []
    schemas: dict[str, ToolSchema] = {}
    for nid, node in dag.nodes.items():
        tool = registry.get(node.tool_name)
        if tool is None:
            arg_errors.append((nid, "*", f"unknown tool {node.tool_name!r}"))
            continue
        problems = tool.check_args(node.args)
        arg_errors.extend((nid, p, r) for p, r in problems)
        try:
            schemas[nid] = tool.bind(node.args)
        except KnowFlowError as exc:
            arg_errors.append((nid, "*", str(exc)))

    if find_cycle(dag) is not None:
        return ValidationReport(False, (), tuple(arg_errors))

    unsatisfied: list[tuple[str, PredicateAtom]] = []
    state = set(dag.initial_state.atoms)
    for nid in topological_order(dag):
        schema = schemas.get(nid)
        if schema is None:
            continue
        for atom in sorted(schema.preconditions - state):
            unsatisfied.append((nid, atom))
        state -= schema.delete_effects
        state |= schema.add_effects

    # order-independent check: Pre must be reachable from ancestors alone
    warnings = []
    flagged = {n for n, _ in unsatisfied}
    for nid in dag.nodes:
        schema = schemas.get(nid)
        if schema is None:
            continue
        reachable = set(dag.initial_state.atoms)
        for anc in dag.ancestors(nid):
            if anc in schemas:
                reachable |= schemas[anc].add_effects
        gap = schema.preconditions - reachable
        if bool(gap) != (nid in flagged):
            if gap:
                warnings.append(
                    f"{nid}: {', '.join(map(str, sorted(gap)))} only provided by non-ancestor nodes"
                )
            else:
                warnings.append(f"{nid}: ancestors provide its preconditions but canonical order loses them")
    return ValidationReport(True, tuple(unsatisfied), tuple(arg_errors), tuple(warnings))


def replace_node(dag: WorkflowDag, v_f: str, v_r: WorkflowNode) -> WorkflowDag:
    if v_f not in dag.nodes:
        raise NoSuchNode(f"no node {v_f!r}")
    if v_r.id != v_f and v_r.id in dag.nodes:
        raise DuplicateNodeId(f"node id {v_r.id!r} already present")
    remap = lambda x: v_r.id if x == v_f else x  # noqa: E731
    nodes = {k: n for k, n in dag.nodes.items() if k != v_f}
    nodes[v_r.id] = v_r
    edges = frozenset((remap(a), remap(b)) for a, b in dag.edges)
    return WorkflowDag(nodes, edges, dag.initial_state)


def insert_node(dag: WorkflowDag, v_p: str, v_f: str, v_new: WorkflowNode) -> WorkflowDag:
    if (v_p, v_f) not in dag.edges:
        raise NoSuchEdge(f"no edge ({v_p}, {v_f})")
    if v_new.id in dag.nodes:
        raise DuplicateNodeId(f"node id {v_new.id!r} already present")
    nodes = dict(dag.nodes)
    nodes[v_new.id] = v_new
    edges = (dag.edges - {(v_p, v_f)}) | {(v_p, v_new.id), (v_new.id, v_f)}
    return WorkflowDag(nodes, edges, dag.initial_state)


def modify_params(
    dag: WorkflowDag, v_f: str, new_args: Mapping[str, Any], registry: ToolRegistry | None = None
) -> WorkflowDag:
    """Swap the argument map of ``v_f``; kinds are checked when a registry is given."""
    if v_f not in dag.nodes:
        raise NoSuchNode(f"no node {v_f!r}")
    node = dag.nodes[v_f]
    if registry is not None:
        tool = registry.get(node.tool_name)
        if tool is None:
            raise UnknownTool(f"unknown tool {node.tool_name!r}")
        bad = [(p, r) for p, r in tool.check_args(new_args)]
        if bad:
            raise ArgKindMismatch("; ".join(f"{p}: {r}" for p, r in bad))
    nodes = dict(dag.nodes)
    nodes[v_f] = node.with_args(copy.deepcopy(dict(new_args)))
    return WorkflowDag(nodes, dag.edges, dag.initial_state)
