"""PDDL-style tool schemas, tool registries and world-state semantics.

A tool declares typed parameters, a set of precondition atoms and a set of
effect atoms, each effect either adding or deleting a fact. Atoms may carry
``?param`` placeholders which are bound from a node's arguments before the
schema is evaluated against a :class:`WorldState`.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator, Mapping

from knowflow.errors import (
    ConflictingEffect,
    DuplicateParam,
    DuplicateToolName,
    Malformed,
    MissingField,
    PreconditionViolated,
    UnboundPlaceholder,
    UnknownTool,
)

PARAM_KINDS = ("string", "number", "path", "enum")
CATEGORIES = ("atomic", "semantic")

_ATOM_RE = re.compile(r"^\s*([A-Za-z_][\w.\-]*)\s*(?:\((.*)\))?\s*$")


def check_fields(doc: Any, required: Iterable[str], optional: Iterable[str] = (), where: str = "document") -> None:
    """Reject non-objects, missing required keys and unknown keys."""
    if not isinstance(doc, Mapping):
        raise Malformed(f"{where}: expected an object, got {type(doc).__name__}")
    required = tuple(required)
    for key in required:
        if key not in doc:
            raise MissingField(key, where)
    allowed = set(required) | set(optional)
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise Malformed(f"{where}: unknown field(s) {', '.join(map(repr, unknown))}")


def load_json_text(text: str | bytes) -> Any:
    try:
        return json.loads(text)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise Malformed(f"invalid JSON: {exc}") from exc


@dataclass(frozen=True, order=True)
class PredicateAtom:
    name: str
    args: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.name:
            raise ValueError("predicate name must be nonempty")
        object.__setattr__(self, "args", tuple(str(a) for a in self.args))

    @property
    def is_ground(self) -> bool:
        return not any(a.startswith("?") for a in self.args)

    def bind(self, bindings: Mapping[str, Any]) -> "PredicateAtom":
        out = []
        for a in self.args:
            if a.startswith("?"):
                key = a[1:]
                if key not in bindings:
                    raise UnboundPlaceholder(f"{self}: no binding for {a}")
                out.append(str(bindings[key]))
            else:
                out.append(a)
        return PredicateAtom(self.name, tuple(out))

    @classmethod
    def parse(cls, text: str) -> "PredicateAtom":
        """Parse the compact ``name(arg, ...)`` notation."""
        m = _ATOM_RE.match(text)
        if not m:
            raise Malformed(f"bad atom {text!r}")
        inner = m.group(2)
        args = tuple(a.strip() for a in inner.split(",")) if inner and inner.strip() else ()
        return cls(m.group(1), args)

    def to_dict(self) -> dict:
        return {"name": self.name, "args": list(self.args)}

    @classmethod
    def from_dict(cls, doc: Any, where: str = "atom") -> "PredicateAtom":
        check_fields(doc, ("name",), ("args",), where)
        name, args = doc["name"], doc.get("args", [])
        if not isinstance(name, str) or not name:
            raise Malformed(f"{where}: name must be a nonempty string")
        if not isinstance(args, list) or not all(isinstance(a, str) for a in args):
            raise Malformed(f"{where}: args must be a list of strings")
        return cls(name, tuple(args))

    def __str__(self) -> str:
        return f"{self.name}({','.join(self.args)})"


def atoms_from_list(items: Any, where: str) -> frozenset[PredicateAtom]:
    if not isinstance(items, list):
        raise Malformed(f"{where}: expected a list of atoms")
    return frozenset(PredicateAtom.from_dict(a, f"{where}[{i}]") for i, a in enumerate(items))


def atoms_to_list(atoms: Iterable[PredicateAtom]) -> list[dict]:
    return [a.to_dict() for a in sorted(atoms)]


@dataclass(frozen=True)
class WorldState:
    atoms: frozenset[PredicateAtom] = frozenset()

    def __post_init__(self):
        atoms = frozenset(self.atoms)
        for a in atoms:
            if not a.is_ground:
                raise UnboundPlaceholder(f"world state atom {a} is not ground")
        object.__setattr__(self, "atoms", atoms)

    @classmethod
    def of(cls, *atoms: PredicateAtom | str) -> "WorldState":
        return cls(frozenset(PredicateAtom.parse(a) if isinstance(a, str) else a for a in atoms))

    def __contains__(self, atom: PredicateAtom) -> bool:
        return atom in self.atoms

    def __iter__(self) -> Iterator[PredicateAtom]:
        return iter(sorted(self.atoms))

    def __len__(self) -> int:
        return len(self.atoms)


@dataclass(frozen=True)
class ParameterSpec:
    name: str
    kind: str
    required: bool = True
    constraints: Mapping[str, Any] | None = None

    def __post_init__(self):
        if not self.name:
            raise Malformed("parameter name must be nonempty")
        if self.kind not in PARAM_KINDS:
            raise Malformed(f"parameter {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "enum":
            values = (self.constraints or {}).get("values")
            if not values:
                raise Malformed(f"parameter {self.name!r}: enum requires a nonempty value list")

    def check(self, value: Any) -> str | None:
        """Return a reason string when ``value`` breaks this spec, else None."""
        if isinstance(value, str) and value.startswith("?"):
            return f"unbound placeholder {value}"
        c = self.constraints or {}
        if self.kind in ("string", "path"):
            if not isinstance(value, str):
                return f"expected {self.kind}, got {type(value).__name__}"
            if self.kind == "path" and not value:
                return "empty path"
        elif self.kind == "number":
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                return f"expected number, got {type(value).__name__}"
            if "min" in c and value < c["min"]:
                return f"{value} below minimum {c['min']}"
            if "max" in c and value > c["max"]:
                return f"{value} above maximum {c['max']}"
        elif self.kind == "enum":
            if value not in c["values"]:
                return f"{value!r} not in {list(c['values'])}"
        return None

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"name": self.name, "kind": self.kind, "required": self.required}
        if self.constraints is not None:
            d["constraints"] = dict(self.constraints)
        return d

    @classmethod
    def from_dict(cls, doc: Any, where: str = "parameter") -> "ParameterSpec":
        check_fields(doc, ("name", "kind"), ("required", "constraints"), where)
        constraints = doc.get("constraints")
        if constraints is not None:
            if not isinstance(constraints, Mapping):
                raise Malformed(f"{where}: constraints must be an object")
            check_fields(constraints, (), ("values", "min", "max"), f"{where}.constraints")
        required = doc.get("required", True)
        if not isinstance(required, bool):
            raise Malformed(f"{where}: required must be boolean")
        if not isinstance(doc["name"], str):
            raise Malformed(f"{where}: name must be a string")
        return cls(doc["name"], doc["kind"], required, dict(constraints) if constraints is not None else None)


@dataclass(frozen=True)
class ToolSchema:
    name: str
    category: str
    parameters: tuple[ParameterSpec, ...] = ()
    preconditions: frozenset[PredicateAtom] = frozenset()
    add_effects: frozenset[PredicateAtom] = frozenset()
    delete_effects: frozenset[PredicateAtom] = frozenset()

    def __post_init__(self):
        if not self.name:
            raise Malformed("tool name must be nonempty")
        if self.category not in CATEGORIES:
            raise Malformed(f"tool {self.name!r}: unknown category {self.category!r}")
        object.__setattr__(self, "parameters", tuple(self.parameters))
        for attr in ("preconditions", "add_effects", "delete_effects"):
            object.__setattr__(self, attr, frozenset(getattr(self, attr)))
        seen = set()
        for p in self.parameters:
            if p.name in seen:
                raise DuplicateParam(f"tool {self.name!r}: duplicate parameter {p.name!r}")
            seen.add(p.name)
        for a in self.preconditions | self.add_effects | self.delete_effects:
            for term in a.args:
                if term.startswith("?") and term[1:] not in seen:
                    raise UnboundPlaceholder(f"tool {self.name!r}: {a} uses {term} but declares no such parameter")
        clash = self.add_effects & self.delete_effects
        if clash:
            raise ConflictingEffect(
                f"tool {self.name!r}: atom(s) both added and deleted: {', '.join(map(str, sorted(clash)))}"
            )

    def param(self, name: str) -> ParameterSpec | None:
        for p in self.parameters:
            if p.name == name:
                return p
        return None

    def check_args(self, args: Mapping[str, Any]) -> list[tuple[str, str]]:
        """List (param-name, reason) problems for a concrete argument map."""
        problems = []
        for p in self.parameters:
            if p.name not in args:
                if p.required:
                    problems.append((p.name, "required parameter missing"))
                continue
            reason = p.check(args[p.name])
            if reason:
                problems.append((p.name, reason))
        for name in sorted(set(args) - {p.name for p in self.parameters}):
            problems.append((name, "unknown parameter"))
        return problems

    def bind(self, args: Mapping[str, Any]) -> "ToolSchema":
        """Ground every ``?param`` placeholder using the node's arguments."""
        if all(a.is_ground for a in self.preconditions | self.add_effects | self.delete_effects):
            return self
        return ToolSchema(
            self.name,
            self.category,
            self.parameters,
            frozenset(a.bind(args) for a in self.preconditions),
            frozenset(a.bind(args) for a in self.add_effects),
            frozenset(a.bind(args) for a in self.delete_effects),
        )

    def to_dict(self) -> dict:
        effects = [dict(a.to_dict(), polarity="add") for a in sorted(self.add_effects)]
        effects += [dict(a.to_dict(), polarity="delete") for a in sorted(self.delete_effects)]
        return {
            "name": self.name,
            "category": self.category,
            "parameters": [p.to_dict() for p in self.parameters],
            "preconditions": atoms_to_list(self.preconditions),
            "effects": effects,
        }

    @classmethod
    def from_dict(cls, doc: Any, where: str | None = None) -> "ToolSchema":
        where = where or "tool"
        check_fields(doc, ("name", "parameters", "preconditions", "effects"), ("category",), where)
        if "name" in doc and isinstance(doc["name"], str):
            where = f"tool {doc['name']!r}"
        if not isinstance(doc["parameters"], list):
            raise Malformed(f"{where}: parameters must be a list")
        params = tuple(ParameterSpec.from_dict(p, f"{where}.parameters[{i}]") for i, p in enumerate(doc["parameters"]))
        pre = atoms_from_list(doc["preconditions"], f"{where}.preconditions")
        if not isinstance(doc["effects"], list):
            raise Malformed(f"{where}: effects must be a list")
        add, delete = set(), set()
        for i, e in enumerate(doc["effects"]):
            ew = f"{where}.effects[{i}]"
            check_fields(e, ("name",), ("args", "polarity"), ew)
            polarity = e.get("polarity", "add")
            if polarity not in ("add", "delete"):
                raise Malformed(f"{ew}: polarity must be 'add' or 'delete'")
            atom = PredicateAtom.from_dict({k: v for k, v in e.items() if k != "polarity"}, ew)
            (add if polarity == "add" else delete).add(atom)
        if not isinstance(doc["name"], str):
            raise Malformed(f"{where}: name must be a string")
        return cls(doc["name"], doc.get("category", "atomic"), params, frozenset(pre), frozenset(add), frozenset(delete))


def parse_tool_schema(text: str | bytes | Mapping) -> ToolSchema:
    """Parse one tool-schema document (JSON text or an already-decoded object)."""
    doc = text if isinstance(text, Mapping) else load_json_text(text)
    return ToolSchema.from_dict(doc)


def serialize_tool_schema(schema: ToolSchema) -> str:
    return json.dumps(schema.to_dict(), indent=2)


class ToolRegistry:
    """Immutable name -> schema map with sorted iteration."""

    __slots__ = ("_tools",)

    def __init__(self, tools: Iterable[ToolSchema] = ()):
        table: dict[str, ToolSchema] = {}
        for t in tools:
            if t.name in table:
                raise DuplicateToolName(f"tool {t.name!r} already registered")
            table[t.name] = t
        self._tools = dict(sorted(table.items()))

    def __getitem__(self, name: str) -> ToolSchema:
        try:
            return self._tools[name]
        except KeyError:
            raise UnknownTool(f"unknown tool {name!r}") from None

    def get(self, name: str) -> ToolSchema | None:
        return self._tools.get(name)

    def __contains__(self, name: object) -> bool:
        return name in self._tools

    def __iter__(self) -> Iterator[ToolSchema]:
        return iter(self._tools.values())

    def __len__(self) -> int:
        return len(self._tools)

    def names(self) -> list[str]:
        return list(self._tools)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ToolRegistry) and self._tools == other._tools

    def __repr__(self) -> str:
        return f"ToolRegistry({self.names()})"

    def to_list(self) -> list[dict]:
        return [t.to_dict() for t in self]

    @classmethod
    def from_list(cls, docs: Any) -> "ToolRegistry":
        if not isinstance(docs, list):
            raise Malformed("registry file must hold a JSON array of tools")
        return cls(ToolSchema.from_dict(d, f"tools[{i}]") for i, d in enumerate(docs))


def register_tool(registry: ToolRegistry, schema: ToolSchema) -> ToolRegistry:
    if schema.name in registry:
        raise DuplicateToolName(f"tool {schema.name!r} already registered")
    return ToolRegistry([*registry, schema])


def load_registry(path) -> ToolRegistry:
    with open(path, encoding="utf-8") as fh:
        return ToolRegistry.from_list(load_json_text(fh.read()))


def _require_ground(atoms: Iterable[PredicateAtom], what: str) -> None:
    for a in atoms:
        if not a.is_ground:
            raise UnboundPlaceholder(f"{what}: atom {a} still has a placeholder")


def preconditions_satisfied(schema: ToolSchema, state: WorldState) -> bool:
    _require_ground(schema.preconditions, schema.name)
    return schema.preconditions <= state.atoms


def missing_preconditions(schema: ToolSchema, state: WorldState) -> list[PredicateAtom]:
    _require_ground(schema.preconditions, schema.name)
    return sorted(schema.preconditions - state.atoms)


def apply_effects(schema: ToolSchema, state: WorldState) -> WorldState:
    if not preconditions_satisfied(schema, state):
        missing = ", ".join(map(str, missing_preconditions(schema, state)))
        raise PreconditionViolated(f"{schema.name}: unmet preconditions {missing}")
    _require_ground(schema.add_effects | schema.delete_effects, schema.name)
    return WorldState((state.atoms - schema.delete_effects) | schema.add_effects)
