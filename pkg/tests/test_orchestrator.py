import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chartlens import bench, evidence as ev, orchestrator as orch, synthgen
from chartlens import scheduler as sch
from chartlens.image import ChartImage
from chartlens.orchestrator import Directive, ParamField, Registry, ToolOutput, ToolSpec
from chartlens.qtypes import parse_question
from chartlens.tools import TOOL_TABLE, default_registry

IMG = ChartImage(np.full((4, 4, 3), 255, np.uint8))
Q = parse_question("what is the value of A?")


def ok_tool(ctx, params):
    return ToolOutput("fine", [ev.Artifact.inline("reading", {"n": params.get("n", 0)})], {"n": params.get("n", 0)})


def broken_tool(ctx, params):
    raise RuntimeError("boom")


def toy_registry(quota=2, cost=1.0):
    reg = Registry()
    reg.register(ToolSpec("ok", "works", (ParamField("n", "int"),), cost=cost, quota=quota), ok_tool)
    reg.register(ToolSpec("broken", "always fails", (), cost=cost, quota=quota), broken_tool)
    return reg.freeze()


def episode_state(reg, budget=8.0):
    cfg = sch.SchedulerConfig(budget=budget)
    pkg = ev.EvidencePackage({"image_digest": IMG.digest()})
    return orch.EpisodeState(reg.new_context(IMG, pkg.meta), reg, cfg, pkg, sch.Belief((), (), 1.0))


def test_library_registry_has_eleven_tools():
    reg = default_registry()
    assert len(reg) == 11 and len(reg.action_space()) == 12
    assert reg.action_space()[-1] == "finish"
    assert reg.names() == [s.name for s, _ in TOOL_TABLE]


def test_duplicate_and_invalid_registration():
    reg = Registry()
    reg.register(ToolSpec("a", "x"), ok_tool)
    with pytest.raises(orch.DuplicateName):
        reg.register(ToolSpec("a", "y"), ok_tool)
    for bad in (ToolSpec("b", "x", cost=-1), ToolSpec("c", "x", quota=0), ToolSpec("bad name", "x"),
                ToolSpec("d", "x", (ParamField("p", "complex"),))):
        with pytest.raises(orch.InvalidSchema):
            reg.register(bad, ok_tool)
    assert reg.names() == ["a"]


def test_parse_directive_examples():
    d = orch.parse_directive('<tool_call>{"name":"calibrate_axis","params":{"axis":"y"},"rationale":"read ticks"}</tool_call>')
    assert d == Directive("tool_call", "calibrate_axis", {"axis": "y"}, "read ticks")
    d = orch.parse_directive('<finish>{"answer":"4.55"}</finish>')
    assert d.kind == "finish" and d.answer == "4.55"
    for junk in ("garbage tokens", "<finish>{}</finish>", "<tool_call>[1]</tool_call>", None, '<tool_call>{"name":1,"params":{}}</tool_call>'):
        assert isinstance(orch.parse_directive(junk), orch.ParseFailure)


@settings(max_examples=200)
@given(st.text())
def test_parse_directive_never_raises(text):
    out = orch.parse_directive(text)
    assert isinstance(out, (Directive, orch.ParseFailure))


def test_directive_render_round_trip():
    d = Directive("tool_call", "read_text", {"x": [1, 2]}, "why")
    assert orch.parse_directive(d.render()) == d


def test_detect_key_elements_fills_state_cache():
    spec = synthgen.generate_spec("bar", 12, {"annotated": False})
    image, gt = synthgen.render(spec)
    reg = default_registry()
    pkg = ev.EvidencePackage({"image_digest": image.digest(), "question": Q.to_dict(), "seed": 0})
    st_ = orch.EpisodeState(reg.new_context(image, pkg.meta), reg, sch.SchedulerConfig(), pkg, sch.Belief((), (), 1.0))
    orch.execute_tool(Directive("tool_call", "classify_chart", {}), st_)
    orch.execute_tool(Directive("tool_call", "detect_key_elements", {}), st_)
    entry = st_.state.entries["detect_key_elements"]
    assert entry["bars"] == len(gt.bars)
    assert entry["evidence_id"] == 2
    assert st_.state.size("detect_key_elements") <= orch.STATE_CAP_BYTES


def test_quota_exceeded_charges_nothing():
    st_ = episode_state(toy_registry(quota=2))
    call = Directive("tool_call", "ok", {"n": 1})
    orch.execute_tool(call, st_)
    orch.execute_tool(call, st_)
    before = (st_.cost, len(st_.package.items), len(st_.history))
    with pytest.raises(orch.QuotaExceeded):
        orch.execute_tool(call, st_)
    assert (st_.cost, len(st_.package.items), len(st_.history)) == before


def test_budget_and_param_checks_charge_nothing():
    st_ = episode_state(toy_registry(cost=3.0), budget=4.0)
    orch.execute_tool(Directive("tool_call", "ok", {}), st_)
    with pytest.raises(orch.BudgetExceeded):
        orch.execute_tool(Directive("tool_call", "ok", {}), st_)
    with pytest.raises(orch.ParamValidationFailure):
        orch.execute_tool(Directive("tool_call", "ok", {"n": "three"}), episode_state(toy_registry()))
    assert st_.cost == 3.0


def test_tool_error_becomes_evidence():
    st_ = episode_state(toy_registry())
    assert orch.execute_tool(Directive("tool_call", "broken", {}), st_) is None
    item = st_.package.items[-1]
    assert item.status == "error" and "boom" in item.summary
    res = orch.run_episode(IMG, Q, sch.SchedulerConfig(), orch.ScriptedPlanner([
        Directive("tool_call", "broken", {}).render(),
        "garbage tokens",
        Directive("tool_call", "ok", {"n": 2}).render(),
    ]), toy_registry())
    assert res.calls == 2 and "parse_failure" in res.trace[1]
    assert [it.status for it in res.package.items][:3] == ["error", "rejected", "ok"]


def test_state_cache_compression_bounded():
    cache = orch.StateCache(cap=300)
    cache.update("t", {"values": list(range(500)), "note": "x" * 1000}, 4)
    assert cache.size("t") <= 300 and cache.entries["t"]["evidence_id"] == 4


def test_zero_budget_gives_incomplete_fallback():
    res = orch.run_episode(IMG, Q, sch.SchedulerConfig(budget=0.0), registry=toy_registry())
    assert res.calls == 0 and res.cost == 0 and res.incomplete and res.package.incomplete
    assert "intermediate" in res.package.final


def test_perfect_tool_finishes_after_one_call():
    labels = list(range(4))
    env = bench.SimEnvironment([bench.SimTool.oracle("oracle", labels, cost=0.0)], bench.uniform_label_prior(labels))
    for truth in labels:
        res = bench.run_sim_episode(env, sch.SchedulerConfig(), truth, seed=truth)
        assert res.calls == 1 and res.answer == truth and not res.incomplete


def test_bar_nqa_episode_answer_and_replay():
    spec = synthgen.generate_spec("bar", 31, {"annotated": False})
    image, gt = synthgen.render(spec)
    text, truth = bench.nqa_question(gt, 1)
    res = orch.run_episode(image, parse_question(text), seed=31)
    assert bench.relaxed_accuracy(res.answer, truth)
    assert ev.replay_verify(res.package, image, default_registry()).all_match
    again = orch.run_episode(image, parse_question(text), seed=31)
    assert again.to_json() == res.to_json()
    assert ev.serialize(again.package) == ev.serialize(res.package)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from(["ok", "broken", "nope", "junk"]), max_size=12),
       st.floats(0.0, 6.0), st.integers(1, 3))
def test_scripted_episodes_respect_budget_quota_and_history(script, budget, quota):
    texts = ["junk" if s == "junk" else Directive("tool_call", s, {}).render() for s in script]
    reg = toy_registry(quota=quota, cost=1.0)
    res = orch.run_episode(IMG, Q, sch.SchedulerConfig(budget=budget), orch.ScriptedPlanner(texts), reg)
    assert res.cost <= budget + 1e-12
    executed = [it for it in res.package.items if it.status in ("ok", "error")]
    assert len(executed) == res.calls
    for name in ("ok", "broken"):
        assert sum(it.tool == name for it in executed) <= quota
    assert res.package.final is not None
    assert ev.verify_chain(res.package.items) is None
