import pytest

from knowflow.actions import RepairAction, resolve_args
from knowflow.errors import Malformed, NoSuchEdge, NoSuchNode, UnboundContextKey
from knowflow.workflow import WorkflowDag, WorkflowNode


def _chain():
    return WorkflowDag.build(
        [WorkflowNode("l", "load"), WorkflowNode("c", "correct"), WorkflowNode("d", "detect", {"k": 1}, 0.5)],
        [("l", "c"), ("c", "d")],
    )


def test_constructors_and_validation():
    assert RepairAction.insert("x").kind == "insert"
    with pytest.raises(Malformed):
        RepairAction("replace")
    with pytest.raises(Malformed):
        RepairAction("teleport")


def test_resolve_insert_defaults(chain_registry):
    act = RepairAction.insert("despeckle").resolve(_chain(), "d", chain_registry)
    assert (act.target, act.predecessor, act.node_id) == ("d", "c", "despeckle@d")


def test_resolve_insert_prefers_feeding_predecessor(chain_registry):
    dag = WorkflowDag.build(
        [WorkflowNode("l", "load"), WorkflowNode("c", "correct"), WorkflowNode("d", "detect")],
        [("l", "c"), ("c", "d"), ("l", "d")],
    )
    # despeckle needs loaded(raster), which only l provides
    act = RepairAction.insert("despeckle").resolve(dag, "d", chain_registry)
    assert act.predecessor == "l"


def test_resolve_insert_fresh_id_on_collision(chain_registry):
    dag = WorkflowDag.build(
        [WorkflowNode("l", "load"), WorkflowNode("c", "correct"), WorkflowNode("d", "detect")], [("l", "c"), ("c", "d")]
    )
    first = RepairAction.insert("despeckle").resolve(dag, "d", chain_registry)
    from knowflow.executor import apply_repair

    dag2 = apply_repair(dag, first, chain_registry)
    second = RepairAction.insert("despeckle").resolve(dag2, "d", chain_registry)
    assert second.node_id == "despeckle@d#2"


def test_resolve_modify_merges_and_context(chain_registry):
    act = RepairAction.modify({"j": "?v"}).resolve(_chain(), "d", chain_registry, {"v": 7})
    assert act.args == {"k": 1, "j": 7} and act.target == "d"
    with pytest.raises(UnboundContextKey) as ei:
        RepairAction.modify({"j": "?nope"}).resolve(_chain(), "d", chain_registry, {})
    assert ei.value.key == "nope"


def test_resolve_errors(chain_registry):
    with pytest.raises(NoSuchNode):
        RepairAction.replace("x", target="zz").resolve(_chain(), "d", chain_registry)
    with pytest.raises(NoSuchEdge):
        RepairAction.insert("despeckle").resolve(_chain(), "l", chain_registry)


def test_replacement_inherits_threshold(chain_registry):
    act = RepairAction.replace("detect").resolve(_chain(), "d", chain_registry)
    assert act.new_node(_chain()).quality_threshold == 0.5


def test_generic_key_and_round_trip():
    a = RepairAction("insert", "x", {"b": 1}, target="t", predecessor="p", node_id="n", message="m")
    assert RepairAction.from_dict(a.to_dict()) == a
    g = a.generic()
    assert g.target is None and g.key() == a.key()
    assert a.describe() == "insert_tool('x')"
    assert RepairAction.modify({"a": 1}).describe() == "modify_params(a=1)"


def test_resolve_args():
    assert resolve_args({"a": "?x", "b": 2, "c": "lit"}, {"x": [1]}) == {"a": [1], "b": 2, "c": "lit"}
