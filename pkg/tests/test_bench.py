import csv
import io
import json

import pytest
from hypothesis import given, settings, strategies as st

from chartlens import bench, synthgen
from chartlens import scheduler as sch
from chartlens.reasoning import DataTable

import oracles


def test_relaxed_accuracy_examples():
    assert bench.relaxed_accuracy(4.55, 4.5)
    assert bench.relaxed_accuracy(3.0, 3.0)
    assert not bench.relaxed_accuracy(0.01, 0.0)
    assert bench.relaxed_accuracy(0.0, 0.0)
    assert not bench.relaxed_accuracy(None, 1.0)
    assert not bench.relaxed_accuracy(4.8, 4.5)
    with pytest.raises(ValueError):
        bench.relaxed_accuracy(1, 1, tolerance=0)


@settings(max_examples=300)
@given(st.floats(-1e6, 1e6), st.floats(1e-3, 1e6).map(lambda x: x), st.floats(1e-3, 1e3))
def test_relaxed_accuracy_scale_consistent(pred, truth, k):
    rel = abs(pred - truth) / truth
    if abs(rel - 0.05) < 1e-9:
        return
    assert bench.relaxed_accuracy(pred, truth) == bench.relaxed_accuracy(pred * k, truth * k)


TRUTH = [("A", "S", 1.0), ("B", "S", 2.0), ("C", "S", 3.0), ("D", "S", 4.0)]


def test_rms_f1_examples():
    assert bench.rms_f1(TRUTH, TRUTH) == 1.0
    assert bench.rms_f1([], TRUTH) == 0.0
    assert bench.rms_f1([], []) == 1.0
    off = [("A", "S", 1.0), ("B", "S", 3.0), ("C", "S", 3.0), ("D", "S", 4.0)]
    got = bench.rms_f1(off, TRUTH)
    assert got == oracles.brute_rms_f1(off, TRUTH)
    assert got == pytest.approx(3.5 / 4)


def test_rms_f1_accepts_tables():
    t = DataTable.from_triples(TRUTH)
    assert bench.rms_f1(t, t.to_dict()) == 1.0


triples = st.lists(st.tuples(st.sampled_from("ABCD"), st.sampled_from(["S", "T"]), st.floats(-100, 100)),
                   max_size=6, unique_by=lambda t: t[:2])


@settings(max_examples=200, deadline=None)
@given(triples, triples, st.randoms(use_true_random=False))
def test_rms_f1_order_free_and_matches_oracle(pred, truth, rnd):
    score = bench.rms_f1(pred, truth)
    assert score == oracles.brute_rms_f1(pred, truth)
    shuffled = list(pred)
    rnd.shuffle(shuffled)
    assert bench.rms_f1(shuffled, truth) == pytest.approx(score, abs=1e-12)
    assert 0.0 <= score <= 1.0


def test_sim_sweep_lambda_trend_small():
    env = bench.bit_environment(4)
    res = bench.run_sim_sweep(env.tools, env.prior, [0.0, 0.2, 0.5, 1.0], 60, seed=1)
    calls = [r.mean_tool_calls for r in res]
    assert all(b <= a for a, b in zip(calls, calls[1:]))
    assert all(r.episodes == 60 for r in res)


def test_sim_sweep_perfect_tool():
    labels = list(range(4))
    tool = bench.SimTool.oracle("oracle", labels)
    res = bench.run_sim_sweep([tool], bench.uniform_label_prior(labels), [0.0, 0.5, 2.0], 30)
    assert all(r.accuracy == 1.0 and r.mean_tool_calls == 1.0 for r in res)


def test_sim_sweep_is_deterministic_and_bounded():
    env = bench.bit_environment(3)
    a = bench.run_sim_sweep(env.tools, env.prior, [2.0, 5.0], 40, seed=9, param="budget")
    b = bench.run_sim_sweep(env.tools, env.prior, [2.0, 5.0], 40, seed=9, param="budget")
    assert a == b
    min_cost = min(t.cost for t in env.tools)
    for r in a:
        assert r.mean_tool_calls <= r.value / min_cost


def test_sweep_outputs():
    rows = [bench.SweepResult("lambda", 0.2, 0.75, 4.5, 100)]
    parsed = list(csv.DictReader(io.StringIO(bench.sweep_csv(rows))))
    assert list(parsed[0]) == list(bench.SWEEP_COLUMNS)
    assert json.loads(bench.sweep_json(rows))[0]["mean_calls"] == 4.5
    with pytest.raises(ValueError):
        bench.run_sim_sweep([], bench.uniform_label_prior([0, 1]), [], 1)


def test_hard_environment_needs_many_reads():
    assert bench.observations_needed(bench.hard_environment()) >= 4


def test_simtool_rows_validated():
    with pytest.raises(ValueError):
        bench.SimTool("bad", 1.0, {0: {0: 0.5, 1: 0.4}}, (0, 1))


def paired(n, start):
    specs = [synthgen.generate_spec(("bar", "line")[i % 2], start + i, {"annotated": True}) for i in range(n)]
    ann = bench.render_corpus(specs)
    dea = bench.render_corpus([synthgen.deannotate(s) for s in specs])
    return ann, dea


def test_deannotation_identical_and_unpaired():
    ann, dea = paired(4, 40)
    assert bench.run_deannotation_study(ann, ann)[2] == 0.0
    with pytest.raises(bench.UnpairedCorpora):
        bench.run_deannotation_study(ann, dea[:3])
    with pytest.raises(bench.UnpairedCorpora):
        bench.run_deannotation_study(ann, list(reversed(dea)))


def test_ocr_only_baseline_collapses_without_labels():
    ann, dea = paired(20, 60)
    bars_a = [it for it in ann if it.spec.chart_type == "bar"]
    bars_d = [it for it in dea if it.spec.chart_type == "bar"]
    assert bench.evaluate_ocr_only(bars_a) >= 0.8
    assert bench.evaluate_ocr_only(bars_d) <= 0.1


def test_evaluate_empty_corpus():
    with pytest.raises(bench.EmptyCorpus):
        bench.evaluate_nqa([])
