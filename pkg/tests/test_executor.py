import dataclasses

import pytest

from knowflow.actions import RepairAction
from knowflow.bench import load_suite
from knowflow.errors import NotAFailure, RepairRejected
from knowflow.executor import RunConfig, apply_repair, diagnose, execute_workflow, run_task, select_repair
from knowflow.memory import FailureSignature, HistoryEntry, MemoryStore, SignaturePattern
from knowflow.pkb import TaskGoal, instantiate
from knowflow.simenv import ScriptedPlanner
from knowflow.workflow import WorkflowDag, WorkflowNode, validate

from conftest import data_path

SAR_SIG = FailureSignature("YOLOvax", {"type": "SAR"}, "low_contrast")
DESPECKLE = RepairAction.insert("Speckle_Suppression", {"filter": "lee", "window_size": 5})


def _chain(image="sar_harbor"):
    return WorkflowDag.build(
        [
            WorkflowNode("n1", "load_raster", {"image_path": image}),
            WorkflowNode("n2", "radiometric_correction"),
            WorkflowNode("n3", "YOLOvax", {"target_classes": "ship", "confidence": 0.5}),
        ],
        [("n1", "n2"), ("n2", "n3")],
    )


def _despeckle_planner():
    return ScriptedPlanner([(SignaturePattern(None, {}, "low_contrast"), DESPECKLE)])


def test_fault_free_chain(env, registry):
    r = execute_workflow(_chain("s2_clear"), env, registry, MemoryStore(), None, RunConfig())
    assert (r.outcome, r.tool_calls, r.adjustments, r.first_pass) == ("success", 3, 0, True)


def test_injected_fault_repaired(env, registry):
    r = execute_workflow(_chain(), env, registry, MemoryStore(), _despeckle_planner(), RunConfig())
    assert r.outcome == "success"
    assert (r.tool_calls, r.planner_calls, r.adjustments) == (5, 1, 1)
    assert [h.node_id for h in r.trace.history] == ["n1", "n2", "n3", "Speckle_Suppression@n3", "n3"]
    assert ("Speckle_Suppression@n3", "n3") in r.trace.w_final.edges


def test_tier2_disabled(env, registry):
    r = execute_workflow(_chain(), env, registry, MemoryStore(), _despeckle_planner(), RunConfig(tier2=False))
    assert (r.outcome, r.tool_calls, r.planner_calls) == ("terminal_failure", 3, 0)
    assert r.trace.final_failure == SAR_SIG
    assert r.interactions == 1


def test_diagnose(env):
    e = HistoryEntry(1, "n3", "YOLOvax", {}, "error", "low_contrast", dataset_id="sar_harbor")
    assert diagnose(e, _chain().nodes["n3"], env) == SAR_SIG
    q = HistoryEntry(1, "n3", "YOLOvax", {}, "quality_fail", score=0.4, dataset_id="sar_harbor")
    assert diagnose(q, _chain().nodes["n3"], env).error_code == "quality_below_threshold"
    with pytest.raises(NotAFailure):
        diagnose(HistoryEntry(1, "n3", "YOLOvax", {}, "success"), _chain().nodes["n3"], env)


class _Spy(ScriptedPlanner):
    calls = 0

    def propose_repair(self, request):
        type(self).calls += 1
        return super().propose_repair(request)


def test_select_repair_tiers(registry):
    store = MemoryStore().with_rule(SignaturePattern.exact(SAR_SIG), DESPECKLE, "recommend", "t")
    spy = _Spy([(SignaturePattern(), RepairAction.modify({"confidence": 0.2}))])
    _Spy.calls = 0
    assert select_repair(SAR_SIG, (), _chain(), store, spy, RunConfig()) == (DESPECKLE, 1)
    assert _Spy.calls == 0
    act, tier = select_repair(SAR_SIG, (), _chain(), MemoryStore(), _despeckle_planner(), RunConfig())
    assert (act, tier) == (DESPECKLE, 2)
    assert select_repair(SAR_SIG, (), _chain(), store, spy, RunConfig(tier1=False, tier2=False)) is None
    assert select_repair(SAR_SIG, (), _chain(), store, spy, RunConfig(dynamic_adjustment=False)) is None


def test_apply_repair(registry):
    dag = _chain()
    ins = DESPECKLE.resolve(dag, "n3", registry)
    out = apply_repair(dag, ins, registry)
    assert validate(out, registry).ok and len(out.nodes) == 4
    with pytest.raises(RepairRejected):
        apply_repair(dag, RepairAction.replace("coregistration").resolve(dag, "n2", registry), registry)
    mod = apply_repair(dag, RepairAction.modify({"confidence": 0.3}).resolve(dag, "n3", registry), registry)
    assert mod.edges == dag.edges and mod.nodes["n3"].args["confidence"] == 0.3
    with pytest.raises(RepairRejected):
        apply_repair(dag, RepairAction.modify({"confidence": 3}).resolve(dag, "n3", registry), registry)
    assert dag == _chain()


def test_rejected_tier1_falls_through(env, registry):
    bad = RepairAction.replace("coregistration")
    store = MemoryStore().with_rule(SignaturePattern.exact(SAR_SIG), bad, "recommend", "t")
    r = execute_workflow(_chain(), env, registry, store, _despeckle_planner(), RunConfig())
    assert r.outcome == "success"
    assert [(a.tier, a.accepted) for a in r.trace.adjustments] == [(1, False), (2, True)]
    assert r.planner_calls == 1


def test_budgets_and_ask_user(env, registry):
    asker = ScriptedPlanner([(SignaturePattern(), RepairAction("ask_user", message="?"))])
    r = execute_workflow(_chain(), env, registry, MemoryStore(), asker, RunConfig(max_repairs_per_node=2))
    assert r.outcome == "terminal_failure"
    assert r.interactions == 3  # two consultations plus the terminal failure
    assert r.tool_calls == 5 and r.adjustments == 0
    r = execute_workflow(_chain(), env, registry, MemoryStore(), asker, RunConfig(max_total_adjustments=1))
    assert r.tool_calls == 4
    aborter = ScriptedPlanner([(SignaturePattern(), RepairAction("abort"))])
    r = execute_workflow(_chain(), env, registry, MemoryStore(), aborter, RunConfig())
    assert (r.outcome, r.tool_calls, r.planner_calls) == ("terminal_failure", 3, 1)


def test_run_task_learning(env, registry, library, planner, ship_goal):
    r1, lib1, st1 = run_task(ship_goal, library, MemoryStore(), env, registry, planner, RunConfig())
    assert len(lib1) == len(library) + 1
    assert len(st1.traces) == 1 and [r.polarity for r in st1.rules] == ["recommend"]
    r2, lib2, st2 = run_task(ship_goal, lib1, st1, env, registry, planner, RunConfig())
    assert r2.first_pass and r2.planner_calls == 0 and r2.trace.template_id == "solidified-001"
    assert lib2 == lib1 and len(st2.traces) == 2 and st2.rules == st1.rules
    r3, lib3, st3 = run_task(ship_goal, library, MemoryStore(), env, registry, planner, RunConfig(learning=False))
    assert lib3 == library and st3.rules == ()


def test_no_wl_uses_planner_plan(env, registry, library, planner, ship_goal):
    cfg = RunConfig().ablate(wl=True)
    r, _, _ = run_task(ship_goal, library, MemoryStore(), env, registry, planner, cfg)
    assert r.trace.template_id is None and r.outcome == "success"
    assert r.planner_calls == 2  # one plan synthesis + one repair
    r, _, _ = run_task(TaskGoal("", {"nothing"}), library, MemoryStore(), env, registry, planner, cfg)
    assert (r.outcome, r.tool_calls, r.interactions) == ("terminal_failure", 0, 1)


def test_counter_invariants_over_suite(registry, library, planner):
    cases = load_suite(data_path("ablation_suite.json"))
    for cfg in (RunConfig(), RunConfig().ablate(wl=True), RunConfig().ablate(da=True), RunConfig().ablate(lc=True)):
        lib, store = library, MemoryStore()
        for case in cases:
            r, lib, store = run_task(case.goal, lib, store, case.env, registry, planner, cfg)
            assert r.tool_calls == len(r.trace.history)
            assert r.adjustments == sum(a.accepted for a in r.trace.adjustments)
            assert r.first_pass == (r.adjustments == 0 and r.outcome == "success")
            assert validate(r.trace.w_final, registry).ok or not r.trace.w_final.nodes


def test_deterministic(env, registry, library, planner, ship_goal):
    a = run_task(ship_goal, library, MemoryStore(), env, registry, planner, RunConfig())[0]
    b = run_task(ship_goal, library, MemoryStore(), env, registry, planner, RunConfig())[0]
    assert a.to_dict() == b.to_dict()


def test_run_config_round_trip():
    cfg = RunConfig(name="x", tier1=False).ablate(lc=True)
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    assert dataclasses.replace(cfg, seed=4).to_dict()["seed"] == 4
