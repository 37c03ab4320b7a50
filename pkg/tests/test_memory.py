import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from knowflow.actions import RepairAction
from knowflow.errors import DuplicateTraceId, Malformed, NotAFailure
from knowflow.executor import RunConfig, run_task
from knowflow.memory import (
    FailureSignature,
    MemoryStore,
    SignaturePattern,
    append_jsonl,
    attribute_failure,
    canonical_json,
    export_store,
    harvest_successful_repairs,
    import_store,
    query_repair,
    read_jsonl,
    record_trace,
)
from knowflow.pkb import TaskGoal

SAR_SIG = FailureSignature("YOLOvax", {"type": "SAR"}, "low_contrast")
DESPECKLE = RepairAction.insert("Speckle_Suppression", {"filter": "lee", "window_size": 5})


@pytest.fixture
def ship_run(registry, library, env, planner, ship_goal):
    return run_task(ship_goal, library, MemoryStore(), env, registry, planner, RunConfig(learning=False))[0]


@pytest.fixture
def strait_failure(registry, library, env, planner):
    goal = TaskGoal("", {"sar", "ship", "detection"}, {"image_path": "sar_strait_c", "target_classes": "ship"})
    return run_task(goal, library, MemoryStore(), env, registry, planner, RunConfig(learning=False))[0]


def test_record_trace(ship_run):
    s = record_trace(MemoryStore(), ship_run.trace)
    assert len(s.traces) == 1
    with pytest.raises(DuplicateTraceId):
        record_trace(s, ship_run.trace)
    other = type(ship_run.trace)(**{**ship_run.trace.__dict__, "trace_id": "trace-0002"})
    s2 = record_trace(s, other)
    assert [t["trace_id"] for t in export_store(s2)["traces"]] == ["trace-0001", "trace-0002"]


def test_query_repair_examples():
    s = MemoryStore().with_rule(SignaturePattern.exact(SAR_SIG), DESPECKLE, "recommend", "t")
    assert query_repair(s, SAR_SIG) == DESPECKLE
    assert query_repair(MemoryStore(), SAR_SIG) is None
    s = MemoryStore()
    s = s.with_rule(SignaturePattern("YOLOvax", {}, "low_contrast"), RepairAction.modify({"confidence": 0.1}), "recommend", "t")
    s = s.with_rule(SignaturePattern("YOLOvax", {"type": "SAR"}, "low_contrast"), DESPECKLE, "recommend", "t")
    s = s.with_rule(SignaturePattern(None, {}, "low_contrast"), RepairAction.modify({"confidence": 0.2}), "recommend", "t")
    assert query_repair(s, SAR_SIG) == DESPECKLE


def test_avoid_rules_suppress_recommendations():
    s = MemoryStore().with_rule(SignaturePattern.exact(SAR_SIG), DESPECKLE, "recommend", "t")
    s = s.with_rule(SignaturePattern("YOLOvax", {}, "low_contrast"), DESPECKLE, "avoid", "t")
    assert query_repair(s, SAR_SIG) == DESPECKLE  # less specific avoid does not win
    s = s.with_rule(SignaturePattern.exact(SAR_SIG), DESPECKLE, "avoid", "t")
    assert query_repair(s, SAR_SIG) is None


def test_rule_text_form():
    s = MemoryStore().with_rule(SignaturePattern.exact(SAR_SIG), DESPECKLE, "recommend", "t")
    assert str(s.rules[0]) == (
        "IF tool('YOLOvax') fails on data(type='SAR') with error('low_contrast') "
        "THEN action(insert_tool('Speckle_Suppression'))"
    )


def test_attribute_failure(strait_failure, ship_run):
    trace = strait_failure.trace
    assert trace.outcome == "terminal_failure"
    out = attribute_failure(MemoryStore(), trace)
    assert {r.polarity for r in out.rules} == {"avoid"}
    assert all(r.action.kind == "modify" for r in out.rules)
    assert out.rules[-1].pattern == SignaturePattern.exact(trace.final_failure)
    with pytest.raises(NotAFailure):
        attribute_failure(MemoryStore(), ship_run.trace)


def test_attribute_failure_without_adjustments(registry, library, env):
    goal = TaskGoal("", {"sar", "ship", "detection"}, {"image_path": "sar_harbor", "target_classes": "ship"})
    res = run_task(goal, library, MemoryStore(), env, registry, None, RunConfig(learning=False))[0]
    out = attribute_failure(MemoryStore(), res.trace)
    assert len(out.rules) == 1 and out.rules[0].action.kind == "none"


def test_harvest(ship_run, registry, library, env, planner):
    s = harvest_successful_repairs(MemoryStore(), ship_run.trace)
    assert len(s.rules) == 1
    rule = s.rules[0]
    assert (rule.polarity, rule.pattern, rule.action) == ("recommend", SignaturePattern.exact(SAR_SIG), DESPECKLE)
    assert harvest_successful_repairs(s, ship_run.trace) == s
    clean = run_task(TaskGoal("", {"ndvi", "vegetation"}, {"image_path": "s2_clear"}), library, MemoryStore(), env, registry, planner,
                     RunConfig(learning=False))[0]
    assert harvest_successful_repairs(MemoryStore(), clean.trace) == MemoryStore()


def test_export_import(ship_run):
    assert export_store(MemoryStore()) == {"traces": [], "rules": []}
    s = MemoryStore().with_rule(SignaturePattern.exact(SAR_SIG), DESPECKLE, "recommend", "t")
    assert canonical_json(import_store(canonical_json(s))) == canonical_json(s)
    full = record_trace(s, ship_run.trace)
    assert import_store(json.loads(json.dumps(export_store(full)))) == full
    with pytest.raises(Malformed):
        import_store(canonical_json(s)[:-5])
    with pytest.raises(Malformed):
        import_store({"traces": []})


def test_jsonl_round_trip(tmp_path, ship_run):
    path = tmp_path / "mem.jsonl"
    assert read_jsonl(path) == MemoryStore()
    s = record_trace(MemoryStore(), ship_run.trace)
    s = harvest_successful_repairs(s, ship_run.trace)
    append_jsonl(path, s.records_since(MemoryStore()))
    assert read_jsonl(path) == s
    path.write_text(path.read_text() + '{"kind": "mystery"}\n')
    with pytest.raises(Malformed):
        read_jsonl(path)


ATTRS = [{}, {"type": "SAR"}, {"band": "C"}, {"type": "SAR", "band": "C"}]
ACTIONS = [DESPECKLE, RepairAction.modify({"confidence": 0.3}), RepairAction.replace("faster_rcnn_detect")]


def _oracle(rules, sig):
    def matches(p):
        return (
            (p.tool_name in (None, sig.tool_name))
            and (p.error_code in (None, sig.error_code))
            and all(sig.data_attrs.get(k) == v for k, v in p.data_attrs.items())
        )

    best = None
    for r in rules:
        if r.polarity != "recommend" or not matches(r.pattern):
            continue
        spec = r.pattern.specificity
        if any(a.polarity == "avoid" and matches(a.pattern) and a.action.key() == r.action.key()
               and a.pattern.specificity >= spec for a in rules):
            continue
        cand = (spec, r.created_at)
        if best is None or cand > best[0]:
            best = (cand, r.action)
    return best[1] if best else None


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**9))
def test_query_matches_bruteforce(seed):
    rng = random.Random(seed)
    s = MemoryStore()
    for _ in range(rng.randint(0, 6)):
        pat = SignaturePattern(rng.choice([None, "YOLOvax"]), rng.choice(ATTRS), rng.choice([None, "low_contrast"]))
        s = s.with_rule(pat, rng.choice(ACTIONS), rng.choice(["recommend", "recommend", "avoid"]), "t")
    sig = FailureSignature("YOLOvax", rng.choice(ATTRS), "low_contrast")
    assert query_repair(s, sig) == _oracle(s.rules, sig)
    assert query_repair(s, sig) == query_repair(s, sig)
