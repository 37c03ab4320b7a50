import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from knowflow.errors import ArgKindMismatch, CycleDetected, DuplicateNodeId, Malformed, NoSuchEdge, NoSuchNode
from knowflow.schema import ParameterSpec, ToolRegistry, WorldState
from knowflow.workflow import (
    WorkflowDag,
    WorkflowNode,
    infer_edges,
    insert_node,
    modify_params,
    replace_node,
    topological_order,
    validate,
)

from conftest import atom, tool
from oracles import brute_force_edges, oracle_ok, random_dag, random_registry, smallest_topological_order


def N(i, t=None, **args):
    return WorkflowNode(i, t or i, args)


def chain(*ids, registry_tools=None):
    return WorkflowDag.build([N(i) for i in ids], list(zip(ids, ids[1:])))


def test_infer_edges_examples():
    r = ToolRegistry([tool("A", add=["x()"]), tool("B", pre=["x()"])])
    assert infer_edges([N("A"), N("B")], r) == {("A", "B")}
    r = ToolRegistry([tool("A", add=["x()"]), tool("B", pre=["y()"])])
    assert infer_edges([N("A"), N("B")], r) == set()


def test_infer_edges_four_tool_oracle(chain_registry):
    nodes = [N(t) for t in ("load", "correct", "despeckle", "detect")]
    expected = {("load", "correct"), ("load", "despeckle"), ("correct", "detect")}
    assert infer_edges(nodes, chain_registry) == expected == brute_force_edges(nodes, chain_registry)


def test_dag_rejects_bad_edges():
    with pytest.raises(Malformed):
        WorkflowDag.build([N("a")], [("a", "a")])
    with pytest.raises(NoSuchNode):
        WorkflowDag.build([N("a")], [("a", "b")])
    with pytest.raises(DuplicateNodeId):
        WorkflowDag.build([N("a"), N("a")])


def test_validate_examples(chain_registry):
    dag = WorkflowDag.build([N("load"), N("correct"), N("detect")], [("load", "correct"), ("correct", "detect")])
    assert validate(dag, chain_registry).ok

    cyc = WorkflowDag.build([N("load"), N("correct")], [("load", "correct"), ("correct", "load")])
    rep = validate(cyc, chain_registry)
    assert not rep.acyclic and not rep.ok


def test_validate_missing_despeckle():
    r = ToolRegistry(
        [
            tool("load", add=["loaded(raster)"]),
            tool("correct", pre=["loaded(raster)"], add=["corrected(raster)"]),
            tool("detect", pre=["corrected(raster)", "speckle_free(raster)"]),
        ]
    )
    dag = WorkflowDag.build([N("load"), N("correct"), N("detect")], [("load", "correct"), ("correct", "detect")])
    rep = validate(dag, r)
    assert rep.unsatisfied == (("detect", atom("speckle_free(raster)")),)
    assert not rep.ok


def test_validate_reports_arg_errors(registry):
    dag = WorkflowDag.build([WorkflowNode("a", "load_raster", {}), WorkflowNode("b", "nope", {})])
    rep = validate(dag, registry)
    assert ("a", "image_path", "required parameter missing") in rep.arg_errors
    assert any(n == "b" and p == "*" for n, p, _ in rep.arg_errors)
    assert rep.to_dict()["ok"] is False


def test_validate_warns_on_non_ancestor_provider():
    # b needs x, which only c provides; c sorts after b and is unrelated to it
    r = ToolRegistry([tool("a"), tool("b", pre=["x()"]), tool("c", add=["x()"])])
    dag = WorkflowDag.build([N("a"), N("b"), N("c")], [("a", "b")])
    rep = validate(dag, r)
    assert rep.unsatisfied == (("b", atom("x()")),)
    assert rep.warnings == ()
    # now c precedes b in canonical order but is still not an ancestor
    dag = WorkflowDag.build([N("a"), N("b"), N("c")], [("a", "c"), ("c", "b")])
    assert validate(dag, r).ok
    # canonical order happens to run the provider first, but nothing orders it
    r = ToolRegistry([tool("a", add=["x()"]), tool("b", pre=["x()"])])
    rep = validate(WorkflowDag.build([N("a"), N("b")]), r)
    assert rep.ok and len(rep.warnings) == 1 and rep.warnings[0].startswith("b:")


def test_topological_examples():
    assert topological_order(WorkflowDag.build([N("N")])) == ["N"]
    diamond = WorkflowDag.build([N("A"), N("B"), N("C"), N("D")], [("A", "B"), ("A", "C"), ("B", "D"), ("C", "D")])
    assert topological_order(diamond) == ["A", "B", "C", "D"]
    with pytest.raises(CycleDetected):
        topological_order(WorkflowDag.build([N("A"), N("B")], [("A", "B"), ("B", "A")]))


def test_replace_remaps_edges():
    dag = chain("A", "B", "C")
    out = replace_node(dag, "B", N("B2", "B"))
    assert out.edges == {("A", "B2"), ("B2", "C")}
    assert "B" not in out.nodes and dag.nodes.keys() == {"A", "B", "C"}
    iso = WorkflowDag.build([N("X")])
    assert replace_node(iso, "X", N("X", "Y")).nodes["X"].tool_name == "Y"
    with pytest.raises(NoSuchNode):
        replace_node(dag, "Z", N("Z"))


def test_replace_with_uncovering_tool(chain_registry):
    r = ToolRegistry([*chain_registry, tool("bad_correct", pre=["loaded(raster)"])])
    dag = WorkflowDag.build([N("load"), N("correct"), N("detect")], [("load", "correct"), ("correct", "detect")])
    out = replace_node(dag, "correct", N("correct", "bad_correct"))
    assert validate(out, r).unsatisfied == (("detect", atom("corrected(raster)")),)


def test_insert_node():
    dag = chain("A", "B")
    out = insert_node(dag, "A", "B", N("N"))
    assert out.edges == {("A", "N"), ("N", "B")}
    with pytest.raises(NoSuchEdge):
        insert_node(dag, "B", "A", N("M"))
    with pytest.raises(DuplicateNodeId):
        insert_node(dag, "A", "B", N("A"))


def test_insert_despeckle_satisfies_detection():
    r = ToolRegistry(
        [
            tool("load", add=["loaded(raster)"]),
            tool("despeckle", pre=["loaded(raster)"], add=["speckle_free(raster)"]),
            tool("detect", pre=["loaded(raster)", "speckle_free(raster)"]),
        ]
    )
    dag = chain("load", "detect")
    assert not validate(dag, r).ok
    assert validate(insert_node(dag, "load", "detect", N("despeckle")), r).ok


def test_modify_params(registry):
    seg = WorkflowNode("s", "semantic_segmentation", {"target_classes": "building", "spatial_resolution_m": 10})
    dag = WorkflowDag.build([WorkflowNode("l", "load_raster", {"image_path": "x"}), WorkflowNode("c", "radiometric_correction"), seg],
                            [("l", "c"), ("c", "s")])
    out = modify_params(dag, "s", {"target_classes": "building", "spatial_resolution_m": 30}, registry)
    assert out.edges == dag.edges
    assert out.nodes["s"].args["spatial_resolution_m"] == 30
    assert dag.nodes["s"].args["spatial_resolution_m"] == 10
    r0, r1 = validate(dag, registry), validate(out, registry)
    assert (r0.acyclic, r0.unsatisfied, r0.warnings) == (r1.acyclic, r1.unsatisfied, r1.warnings)
    lc = WorkflowDag.build([WorkflowNode("k", "land_cover_classification", {"model": "unet", "n_classes": 4})])
    with pytest.raises(ArgKindMismatch):
        modify_params(lc, "k", {"model": "svm", "n_classes": 4}, registry)


def test_round_trip():
    dag = WorkflowDag.build(
        [WorkflowNode("a", "t", {"x": 1}, 0.5), WorkflowNode("b", "u", {"y": [1, 2]})], [("a", "b")], {atom("p(q)")}
    )
    assert WorkflowDag.from_dict(dag.to_dict()) == dag
    assert WorkflowDag.from_dict(__import__("json").loads(dag.to_json())) == dag


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 10**9))
def test_infer_edges_matches_oracle(seed):
    rng = random.Random(seed)
    reg = random_registry(rng)
    nodes = [WorkflowNode(f"n{i}", t) for i, t in enumerate(reg.names())]
    assert infer_edges(nodes, reg) == brute_force_edges(nodes, reg)


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 10**9))
def test_topological_order_and_validate_match_oracle(seed):
    rng = random.Random(seed)
    reg = random_registry(rng)
    dag = random_dag(rng, reg)
    assert topological_order(dag) == smallest_topological_order(list(dag.nodes), dag.edges)
    assert validate(dag, reg).ok == oracle_ok(dag, reg)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**9))
def test_insert_and_modify_preserve_acyclicity(seed):
    rng = random.Random(seed)
    reg = random_registry(rng)
    dag = random_dag(rng, reg)
    if dag.edges:
        a, b = sorted(dag.edges)[rng.randrange(len(dag.edges))]
        out = insert_node(dag, a, b, WorkflowNode("new", reg.names()[0]))
        topological_order(out)
    nid = sorted(dag.nodes)[0]
    topological_order(modify_params(dag, nid, {"level": 3}))
    topological_order(replace_node(dag, nid, WorkflowNode(nid, reg.names()[-1])))
