"""Evolutionary memory: execution traces and pattern-action rules.

The store is an append-only value. Every operation returns a new store that
extends the old one; nothing already recorded is changed or removed.
Recommend rules are harvested from repairs that worked, avoid rules are
attributed from terminal failures.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

from knowflow.actions import RepairAction
from knowflow.errors import DuplicateTraceId, Malformed, NotAFailure
from knowflow.pkb import TaskGoal
from knowflow.schema import PredicateAtom, atoms_from_list, atoms_to_list, check_fields, load_json_text
from knowflow.workflow import WorkflowDag

log = logging.getLogger(__name__)

STATUSES = ("success", "error", "quality_fail")
QUALITY_ERROR = "quality_below_threshold"


@dataclass(frozen=True)
class FailureSignature:
    tool_name: str
    data_attrs: Mapping[str, Any]
    error_code: str

    def __post_init__(self):
        if not self.error_code:
            raise Malformed("failure signature needs an error code")
        object.__setattr__(self, "data_attrs", dict(self.data_attrs))

    def to_dict(self) -> dict:
        return {"tool_name": self.tool_name, "data_attrs": dict(sorted(self.data_attrs.items())), "error_code": self.error_code}

    @classmethod
    def from_dict(cls, doc: Any, where: str = "signature") -> "FailureSignature":
        check_fields(doc, ("tool_name", "error_code"), ("data_attrs",), where)
        attrs = doc.get("data_attrs", {})
        if not isinstance(attrs, Mapping):
            raise Malformed(f"{where}: data_attrs must be an object")
        return cls(doc["tool_name"], dict(attrs), doc["error_code"])

    def __str__(self) -> str:
        attrs = ", ".join(f"{k}={v!r}" for k, v in sorted(self.data_attrs.items()))
        return f"tool({self.tool_name!r}) on data({attrs}) with error({self.error_code!r})"


@dataclass(frozen=True)
class SignaturePattern:
    """A failure signature whose tool and error fields may be wildcards (None)."""

    tool_name: str | None = None
    data_attrs: Mapping[str, Any] = field(default_factory=dict)
    error_code: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "data_attrs", dict(self.data_attrs))

    @classmethod
    def exact(cls, sig: FailureSignature) -> "SignaturePattern":
        return cls(sig.tool_name, dict(sig.data_attrs), sig.error_code)

    def matches(self, sig: FailureSignature) -> bool:
        if self.tool_name is not None and self.tool_name != sig.tool_name:
            return False
        if self.error_code is not None and self.error_code != sig.error_code:
            return False
        return all(k in sig.data_attrs and sig.data_attrs[k] == v for k, v in self.data_attrs.items())

    @property
    def specificity(self) -> int:
        return (self.tool_name is not None) + (self.error_code is not None) + len(self.data_attrs)

    def to_dict(self) -> dict:
        d: dict[str, Any] = {}
        if self.tool_name is not None:
            d["tool_name"] = self.tool_name
        d["data_attrs"] = dict(sorted(self.data_attrs.items()))
        if self.error_code is not None:
            d["error_code"] = self.error_code
        return d

    @classmethod
    def from_dict(cls, doc: Any, where: str = "pattern") -> "SignaturePattern":
        check_fields(doc, (), ("tool_name", "data_attrs", "error_code"), where)
        attrs = doc.get("data_attrs", {})
        if not isinstance(attrs, Mapping):
            raise Malformed(f"{where}: data_attrs must be an object")
        return cls(doc.get("tool_name"), dict(attrs), doc.get("error_code"))


@dataclass(frozen=True)
class HistoryEntry:
    seq: int
    node_id: str
    tool_name: str
    args: Mapping[str, Any]
    status: str
    error_code: str | None = None
    score: float | None = None
    output_atoms: frozenset[PredicateAtom] = frozenset()
    dataset_id: str | None = None

    def __post_init__(self):
        if self.status not in STATUSES:
            raise Malformed(f"unknown status {self.status!r}")
        if self.status == "error" and not self.error_code:
            raise Malformed("error entries need an error code")
        object.__setattr__(self, "args", dict(self.args))
        object.__setattr__(self, "output_atoms", frozenset(self.output_atoms))

    @property
    def ok(self) -> bool:
        return self.status == "success"

    def to_dict(self) -> dict:
        d: dict[str, Any] = {
            "seq": self.seq,
            "node_id": self.node_id,
            "tool_name": self.tool_name,
            "args": copy.deepcopy(dict(self.args)),
            "status": self.status,
        }
        if self.error_code is not None:
            d["error_code"] = self.error_code
        if self.score is not None:
            d["score"] = self.score
        d["output_atoms"] = atoms_to_list(self.output_atoms)
        if self.dataset_id is not None:
            d["dataset_id"] = self.dataset_id
        return d

    @classmethod
    def from_dict(cls, doc: Any, where: str = "history entry") -> "HistoryEntry":
        check_fields(
            doc,
            ("seq", "node_id", "tool_name", "status"),
            ("args", "error_code", "score", "output_atoms", "dataset_id"),
            where,
        )
        return cls(
            doc["seq"],
            doc["node_id"],
            doc["tool_name"],
            copy.deepcopy(dict(doc.get("args", {}))),
            doc["status"],
            doc.get("error_code"),
            doc.get("score"),
            atoms_from_list(doc.get("output_atoms", []), f"{where}.output_atoms"),
            doc.get("dataset_id"),
        )


@dataclass(frozen=True)
class Adjustment:
    """One repair attempt: the proposal, its resolved form and whether it was accepted."""

    seq: int
    node_id: str
    signature: FailureSignature
    action: RepairAction
    tier: int
    accepted: bool
    applied: RepairAction | None = None
    note: str | None = None

    def to_dict(self) -> dict:
        d: dict[str, Any] = {
            "seq": self.seq,
            "node_id": self.node_id,
            "signature": self.signature.to_dict(),
            "action": self.action.to_dict(),
            "tier": self.tier,
            "accepted": self.accepted,
        }
        if self.applied is not None:
            d["applied"] = self.applied.to_dict()
        if self.note is not None:
            d["note"] = self.note
        return d

    @classmethod
    def from_dict(cls, doc: Any, where: str = "adjustment") -> "Adjustment":
        check_fields(doc, ("seq", "node_id", "signature", "action", "tier", "accepted"), ("applied", "note"), where)
        return cls(
            doc["seq"],
            doc["node_id"],
            FailureSignature.from_dict(doc["signature"], f"{where}.signature"),
            RepairAction.from_dict(doc["action"], f"{where}.action"),
            doc["tier"],
            bool(doc["accepted"]),
            RepairAction.from_dict(doc["applied"], f"{where}.applied") if doc.get("applied") else None,
            doc.get("note"),
        )


@dataclass(frozen=True)
class ExecutionTrace:
    trace_id: str
    goal: TaskGoal
    w_init: WorkflowDag
    history: tuple[HistoryEntry, ...]
    adjustments: tuple[Adjustment, ...]
    w_final: WorkflowDag
    outcome: str
    final_failure: FailureSignature | None = None
    template_id: str | None = None
    format_failures: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "history", tuple(self.history))
        object.__setattr__(self, "adjustments", tuple(self.adjustments))
        object.__setattr__(self, "format_failures", tuple(self.format_failures))
        if self.outcome not in ("success", "terminal_failure"):
            raise Malformed(f"unknown outcome {self.outcome!r}")
        seqs = [h.seq for h in self.history]
        if any(b <= a for a, b in zip(seqs, seqs[1:])):
            raise Malformed(f"trace {self.trace_id!r}: history sequence numbers must increase")
        if self.outcome == "success":
            if not self.history or not self.history[-1].ok:
                raise Malformed(f"trace {self.trace_id!r}: success requires a successful last entry")
            done = {h.node_id for h in self.history if h.ok}
            if set(self.w_final.nodes) - done:
                raise Malformed(f"trace {self.trace_id!r}: success requires every node executed")

    def to_dict(self) -> dict:
        d: dict[str, Any] = {
            "trace_id": self.trace_id,
            "goal": self.goal.to_dict(),
            "w_init": self.w_init.to_dict(),
            "history": [h.to_dict() for h in self.history],
            "adjustments": [a.to_dict() for a in self.adjustments],
            "w_final": self.w_final.to_dict(),
            "outcome": self.outcome,
        }
        if self.final_failure is not None:
            d["final_failure"] = self.final_failure.to_dict()
        if self.template_id is not None:
            d["template_id"] = self.template_id
        if self.format_failures:
            d["format_failures"] = list(self.format_failures)
        return d

    @classmethod
    def from_dict(cls, doc: Any, where: str = "trace") -> "ExecutionTrace":
        check_fields(
            doc,
            ("trace_id", "goal", "w_init", "history", "adjustments", "w_final", "outcome"),
            ("final_failure", "template_id", "format_failures"),
            where,
        )
        ff = doc.get("final_failure")
        return cls(
            doc["trace_id"],
            TaskGoal.from_dict(doc["goal"], f"{where}.goal"),
            WorkflowDag.from_dict(doc["w_init"], f"{where}.w_init"),
            tuple(HistoryEntry.from_dict(h, f"{where}.history[{i}]") for i, h in enumerate(doc["history"])),
            tuple(Adjustment.from_dict(a, f"{where}.adjustments[{i}]") for i, a in enumerate(doc["adjustments"])),
            WorkflowDag.from_dict(doc["w_final"], f"{where}.w_final"),
            doc["outcome"],
            FailureSignature.from_dict(ff, f"{where}.final_failure") if ff else None,
            doc.get("template_id"),
            tuple(doc.get("format_failures", ())),
        )


@dataclass(frozen=True)
class PatternActionRule:
    rule_id: str
    pattern: SignaturePattern
    action: RepairAction
    polarity: str
    created_at: int
    provenance: str = ""

    def __post_init__(self):
        if self.polarity not in ("recommend", "avoid"):
            raise Malformed(f"unknown rule polarity {self.polarity!r}")
        if self.polarity == "recommend" and not self.action.changes_graph and self.action.kind != "ask_user":
            raise Malformed("recommend rules need a concrete repair action")

    def key(self) -> tuple:
        return (self.polarity, json.dumps(self.pattern.to_dict(), sort_keys=True), self.action.key())

    def to_dict(self) -> dict:
        return {
            "rule_id": self.rule_id,
            "pattern": self.pattern.to_dict(),
            "action": self.action.to_dict(),
            "polarity": self.polarity,
            "created_at": self.created_at,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, doc: Any, where: str = "rule") -> "PatternActionRule":
        check_fields(doc, ("rule_id", "pattern", "action", "polarity", "created_at"), ("provenance",), where)
        return cls(
            doc["rule_id"],
            SignaturePattern.from_dict(doc["pattern"], f"{where}.pattern"),
            RepairAction.from_dict(doc["action"], f"{where}.action"),
            doc["polarity"],
            doc["created_at"],
            doc.get("provenance", ""),
        )

    def __str__(self) -> str:
        p = self.pattern
        verb = "THEN" if self.polarity == "recommend" else "AVOID"
        attrs = ", ".join(f"{k}={v!r}" for k, v in sorted(p.data_attrs.items()))
        return (
            f"IF tool({p.tool_name or '*'!r}) fails on data({attrs}) with error({p.error_code or '*'!r}) "
            f"{verb} action({self.action.describe()})"
        )


@dataclass(frozen=True)
class MemoryStore:
    traces: tuple[ExecutionTrace, ...] = ()
    rules: tuple[PatternActionRule, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "traces", tuple(self.traces))
        object.__setattr__(self, "rules", tuple(self.rules))

    def trace_ids(self) -> set[str]:
        return {t.trace_id for t in self.traces}

    def next_trace_id(self) -> str:
        ids = self.trace_ids()
        k = len(self.traces) + 1
        while f"trace-{k:04d}" in ids:
            k += 1
        return f"trace-{k:04d}"

    def with_rule(self, pattern: SignaturePattern, action: RepairAction, polarity: str, provenance: str) -> "MemoryStore":
        """Append a rule unless an identical (pattern, action, polarity) rule exists."""
        created = len(self.rules) + 1
        rule = PatternActionRule(f"rule-{created:04d}", pattern, action.generic(), polarity, created, provenance)
        if any(r.key() == rule.key() for r in self.rules):
            return self
        return MemoryStore(self.traces, (*self.rules, rule))

    def records_since(self, other: "MemoryStore") -> list[dict]:
        """JSON-lines records appended relative to the prefix ``other``."""
        out = [dict(kind="trace", **t.to_dict()) for t in self.traces[len(other.traces):]]
        out += [dict(kind="rule", **r.to_dict()) for r in self.rules[len(other.rules):]]
        return out


def record_trace(store: MemoryStore, trace: ExecutionTrace) -> MemoryStore:
    if trace.trace_id in store.trace_ids():
        raise DuplicateTraceId(f"trace {trace.trace_id!r} already recorded")
    return MemoryStore((*store.traces, trace), store.rules)


def _ranked_recommendations(store: MemoryStore, sig: FailureSignature) -> list[PatternActionRule]:
    matching = [r for r in store.rules if r.pattern.matches(sig)]
    avoid = [r for r in matching if r.polarity == "avoid"]
    survivors = []
    for r in matching:
        if r.polarity != "recommend":
            continue
        spec = r.pattern.specificity
        if any(a.action.key() == r.action.key() and a.pattern.specificity >= spec for a in avoid):
            continue
        survivors.append(r)
    survivors.sort(key=lambda r: (-r.pattern.specificity, -r.created_at))
    return survivors


def query_repair(store: MemoryStore, sig: FailureSignature) -> RepairAction | None:
    """Tier-1 lookup: most specific surviving recommend rule, newest on ties."""
    ranked = _ranked_recommendations(store, sig)
    return ranked[0].action if ranked else None


def _next_run_of(trace: ExecutionTrace, node_id: str, after_seq: int) -> HistoryEntry | None:
    for h in trace.history:
        if h.seq > after_seq and h.node_id == node_id:
            return h
    return None


def attribute_failure(store: MemoryStore, trace: ExecutionTrace) -> MemoryStore:
    """Distil a terminal failure into avoid rules."""
    if trace.outcome != "terminal_failure":
        raise NotAFailure(f"trace {trace.trace_id!r} did not fail")
    out = store
    for adj in trace.adjustments:
        nxt = _next_run_of(trace, adj.node_id, adj.seq)
        failed = not adj.accepted or nxt is None or not nxt.ok
        if failed:
            out = out.with_rule(SignaturePattern.exact(adj.signature), adj.action, "avoid", trace.trace_id)
    final = trace.final_failure
    if final is not None:
        last = trace.adjustments[-1].action if trace.adjustments else RepairAction("none")
        out = out.with_rule(SignaturePattern.exact(final), last, "avoid", trace.trace_id)
    return out


def harvest_successful_repairs(store: MemoryStore, trace: ExecutionTrace) -> MemoryStore:
    """Turn each accepted repair whose node then succeeded into a recommend rule."""
    if trace.outcome != "success":
        return store
    out = store
    for adj in trace.adjustments:
        if not adj.accepted or not adj.action.changes_graph:
            continue
        nxt = _next_run_of(trace, adj.node_id, adj.seq)
        if nxt is not None and nxt.ok:
            out = out.with_rule(SignaturePattern.exact(adj.signature), adj.action, "recommend", trace.trace_id)
    return out


def export_store(store: MemoryStore) -> dict:
    return {"traces": [t.to_dict() for t in store.traces], "rules": [r.to_dict() for r in store.rules]}


def import_store(document: Any) -> MemoryStore:
    if isinstance(document, (str, bytes)):
        document = load_json_text(document)
    try:
        check_fields(document, ("traces", "rules"), (), "memory store")
        if not isinstance(document["traces"], list) or not isinstance(document["rules"], list):
            raise Malformed("memory store: traces and rules must be lists")
        store = MemoryStore()
        for i, t in enumerate(document["traces"]):
            store = record_trace(store, ExecutionTrace.from_dict(t, f"traces[{i}]"))
        rules = tuple(PatternActionRule.from_dict(r, f"rules[{i}]") for i, r in enumerate(document["rules"]))
    except Malformed:
        raise
    except (KeyError, TypeError, ValueError, DuplicateTraceId) as exc:
        raise Malformed(f"memory store: {exc}") from exc
    return MemoryStore(store.traces, rules)


def canonical_json(store: MemoryStore) -> str:
    return json.dumps(export_store(store), sort_keys=True, separators=(",", ":"))


def read_jsonl(path) -> MemoryStore:
    """Load a JSON-lines store file; a missing file is an empty store."""
    traces, rules = [], []
    try:
        fh = open(path, encoding="utf-8")
    except FileNotFoundError:
        return MemoryStore()
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = load_json_text(line)
            if not isinstance(rec, dict) or "kind" not in rec:
                raise Malformed(f"{path}:{lineno}: record without a kind tag")
            kind = rec.pop("kind")
            if kind == "trace":
                traces.append(rec)
            elif kind == "rule":
                rules.append(rec)
            else:
                raise Malformed(f"{path}:{lineno}: unknown record kind {kind!r}")
    return import_store({"traces": traces, "rules": rules})


def append_jsonl(path, records: Iterable[Mapping[str, Any]]) -> int:
    n = 0
    with open(path, "a", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
            n += 1
    return n
