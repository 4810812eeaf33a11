"""End-to-end acceptance checks, one test per criterion.

Each test records its verdict and measured numbers; the terminal summary
prints them as one PASS/FAIL line per criterion.
"""

import math
import random
import time

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from chartlens import bench, evidence as ev, grouptalk as gt, orchestrator as orch
from chartlens import perception as pc
from chartlens import scheduler as sch
from chartlens import synthgen
from chartlens.qtypes import AnswerCandidate, parse_question
from chartlens.synthgen import ChartSpec, Series
from chartlens.tools import default_registry

import conftest
import oracles


def record(n, ok, detail):
    conftest.ACCEPTANCE[n] = (bool(ok), detail)
    assert ok, detail


# ---------------------------------------------------------------- 1


def test_criterion_01_eig_matches_mutual_information():
    rng = np.random.default_rng(1)
    cases = []
    for _ in range(1000):
        k, m = int(rng.integers(2, 7)), int(rng.integers(2, 7))
        prior = rng.dirichlet(np.ones(k))
        channel = rng.dirichlet(np.ones(m), size=k)
        zero = rng.random((k, m)) < 0.15  # some impossible outcomes
        channel = np.where(zero, 0.0, channel)
        channel[channel.sum(axis=1) == 0, 0] = 1.0
        channel = channel / channel.sum(axis=1, keepdims=True)
        cases.append((prior.tolist(), channel.tolist()))
    t0 = time.perf_counter()
    worst = 0.0
    for prior, channel in cases:
        belief = sch.Belief.normalized([AnswerCandidate("label", i) for i in range(len(prior))], prior, 0.0)
        model = sch.ObservationModel.discrete("t", {y: dict(enumerate(r)) for y, r in enumerate(channel)}, range(len(channel[0])))
        gain = sch.eig_exact(belief, model)
        worst = max(worst, abs(gain - oracles.mutual_information(belief.probs, channel)))
        assert 0.0 <= gain <= sch.entropy(belief) + 1e-12
    elapsed = time.perf_counter() - t0
    record(1, worst <= 1e-9 and elapsed < 5.0, f"max |EIG - MI| = {worst:.2e} nats over 1000 instances in {elapsed:.2f} s")


# ---------------------------------------------------------------- 2


class AuditingPlanner:
    """Wraps the default planner and checks every decision against the stop rule."""

    def __init__(self):
        self.inner = orch.EigPlanner()
        self.violations = []

    def propose(self, view):
        text = self.inner.propose(view)
        cfg = view.config
        affordable = [g - cfg.lam * view.costs[n] for n, g in view.scores if view.cumulative_cost + view.costs[n] <= cfg.budget + 1e-12]
        best = max(affordable, default=-math.inf)
        must_stop = best <= cfg.eta or view.cumulative_cost >= cfg.budget or view.round >= cfg.max_rounds or not affordable
        d = orch.parse_directive(text)
        if must_stop and d.kind != "finish":
            self.violations.append(("continued", best, view.cumulative_cost, view.round))
        if not must_stop and d.kind == "finish":
            self.violations.append(("stopped early", best, view.cumulative_cost, view.round))
        return text


def test_criterion_02_budget_and_stop_safety():
    rng = random.Random(2)
    violations = 0
    over_budget = 0
    calls = 0
    for e in range(500):
        env = bench.bit_environment(rng.choice([2, 3, 4]), strong=(rng.choice([0.5, 1.0, 1.5]), 0.05), weak=(rng.choice([0.1, 0.25, 0.7]), 0.2))
        cfg = sch.SchedulerConfig(lam=rng.choice([0.0, 0.1, 0.2, 0.5, 1.0]), budget=rng.choice([0.0, 0.5, 1.0, 2.5, 3.0, 8.0]),
                                  eta=rng.choice([0.0, 0.05, 0.2]))
        planner = AuditingPlanner()
        truth = rng.choice(env.labels)
        res = bench.run_sim_episode(env, cfg, truth, seed=e, planner=planner)
        over_budget += res.cost > cfg.budget + 1e-12
        violations += len(planner.violations)
        calls += res.calls
    record(2, violations == 0 and over_budget == 0,
           f"500 episodes, {calls} calls, {over_budget} over-budget episodes, {violations} stop-rule violations")


# ---------------------------------------------------------------- 3


def test_criterion_03_lambda_trend():
    env = bench.bit_environment(4)
    res = bench.run_sim_sweep(env.tools, env.prior, [0.0, 0.2, 0.5, 1.0], 200, seed=3, base=sch.SchedulerConfig(budget=8.0))
    calls = [r.mean_tool_calls for r in res]
    ok = all(b <= a for a, b in zip(calls, calls[1:])) and all(r.episodes >= 200 for r in res)
    record(3, ok, "mean calls at lambda 0/0.2/0.5/1.0 = " + " / ".join(f"{c:.2f}" for c in calls))


# ---------------------------------------------------------------- 4


def test_criterion_04_budget_trend():
    env = bench.hard_environment()
    res = bench.run_sim_sweep(env.tools, env.prior, [3.0, 8.0], 200, seed=4, param="budget", base=sch.SchedulerConfig(lam=0.2))
    a3, a8 = res[0].accuracy, res[1].accuracy
    record(4, a8 - a3 >= 0.05, f"accuracy B=3 {100 * a3:.1f}% vs B=8 {100 * a8:.1f}% (gap {100 * (a8 - a3):.1f} p.p.)")


# ---------------------------------------------------------------- 5


def test_criterion_05_sector_quantification():
    t0 = time.perf_counter()
    errs = []
    for kind in ("pie", "donut"):
        for i in range(200):
            spec = synthgen.generate_spec(kind, 20000 + i, {"min_share": 0.04})
            assert 3 <= len(spec.category_labels) <= 8 and spec.canvas == (512, 512)
            image, gt_ = synthgen.render(spec)
            seg = pc.segment_sectors_full(image, kind, 0, legend=pc.detect_legend(image) or None)
            truth_c = np.array([s["color"] for s in gt_.sectors], float)
            est_c = np.array([e.color for e in seg.estimates], float)
            rows, cols = linear_sum_assignment(np.linalg.norm(truth_c[:, None] - est_c[None], axis=2))
            got = {r: seg.estimates[c].proportion for r, c in zip(rows, cols)}
            errs += [abs(100 * got.get(k, 0.0) - 100 * s["share"]) for k, s in enumerate(gt_.sectors)]
    elapsed = time.perf_counter() - t0
    errs = np.array(errs)
    mae, within = float(errs.mean()), float((errs <= 3.0).mean())
    record(5, mae <= 1.5 and within >= 0.95 and elapsed < 60,
           f"{len(errs)} sectors: MAE {mae:.3f} p.p., {100 * within:.1f}% within 3 p.p., {elapsed:.1f} s")


# ---------------------------------------------------------------- 6


def test_criterion_06_unannotated_nqa():
    specs = [synthgen.generate_spec(("bar", "line")[i % 2], 1000 + i, {"annotated": True}) for i in range(200)]
    ann = bench.render_corpus(specs)
    dea = bench.render_corpus([synthgen.deannotate(s) for s in specs])
    assert all(it.truth.value_labels() == [] for it in dea)
    acc_a, acc_d, drop = bench.run_deannotation_study(ann, dea)
    record(6, acc_d >= 0.90 and drop <= 5.0,
           f"relaxed accuracy annotated {100 * acc_a:.1f}%, de-annotated {100 * acc_d:.1f}%, drop {drop:.1f} p.p.")


# ---------------------------------------------------------------- 7


def test_criterion_07_worked_example():
    spec = ChartSpec("bar", [Series("Number of Cars Sold", (31, 119, 180), [3.5, 4.55, 2.5])], ["Ford", "Hyundai", "Kia"],
                     [(0.0, 6.0)], 0.5, False)
    image, gt_ = synthgen.render(spec)
    res = orch.run_episode(image, parse_question("what is the Number of Cars Sold of Hyundai?"), seed=7)
    reading = None
    for it in res.package.items:
        for a in it.artifacts:
            p = a.payload if isinstance(a.payload, dict) else {}
            if p.get("source") == "read_via_auxline" and p.get("target", "").startswith("HYUNDAI"):
                reading = p["value"]
    ok = reading is not None and 4.50 <= reading <= 4.60 and bench.relaxed_accuracy(reading, 4.5) and bench.relaxed_accuracy(res.answer, 4.5)
    bar = next(b for b in gt_.bars if b["category"] == "Hyundai")
    ticks = (gt_.x_axis[1] - bar["box"][1]) / gt_.pixels_per_tick
    record(7, ok, f"bar spans {ticks:.2f} ticks of 0.5; auxline reading {reading}; answer {res.answer}")


# ---------------------------------------------------------------- 8


def test_criterion_08_chart_to_table():
    items = bench.render_corpus([synthgen.generate_spec("bar", 5000 + i) for i in range(100)])
    mean, scores = bench.evaluate_tables(items)
    record(8, mean >= 0.90, f"mean RMS_F1 {mean:.4f} over 100 bar charts (min {min(scores):.3f})")


# ---------------------------------------------------------------- 9


def _item_spans(data: bytes, n_items: int):
    """Byte ranges of each item inside the canonical package bytes."""
    spans, pos = [], data.index(b'"items":[') + len(b'"items":[')
    for _ in range(n_items):
        depth, start = 0, pos
        for j in range(pos, len(data)):
            ch = data[j : j + 1]
            if ch == b'"':
                j2 = j + 1
                while data[j2 : j2 + 1] != b'"':
                    j2 += 2 if data[j2 : j2 + 1] == b"\\" else 1
            if ch == b"{":
                depth += 1
            elif ch == b"}":
                depth -= 1
                if depth == 0:
                    spans.append((start, j + 1))
                    pos = j + 2
                    break
    return spans


def test_criterion_09_evidence_integrity(tmp_path):
    kinds = ("bar", "line", "pie", "donut", "scatter")
    registry = default_registry()
    rng = random.Random(9)
    mismatches = round_trip_failures = undetected = tampers = 0
    for i in range(100):
        kind = kinds[i % 5]
        spec = synthgen.generate_spec(kind, 9000 + i, {"annotated": i % 2 == 0})
        image, gt_ = synthgen.render(spec)
        if i % 3 == 2 and kind in ("bar", "pie", "donut"):
            q = bench.compare_question(gt_, i)[0]
        elif i % 3 == 1 and kind == "bar":
            q = "Convert the chart to a table"
        else:
            q = bench.nqa_question(gt_, i)[0]
        res = orch.run_episode(image, parse_question(q), seed=i)
        ev.save(res.package, tmp_path / f"p{i}")
        pkg = ev.load(tmp_path / f"p{i}")
        mismatches += not ev.replay_verify(pkg, image, registry).all_match
        data = ev.serialize(pkg)
        round_trip_failures += ev.serialize(ev.load_bytes_verified(data)) != data
        spans = _item_spans(data, len(pkg.items))
        targets = [(s, e) for s, e in spans for _ in range(2)]
        for s, e in targets:
            pos = rng.randrange(s, e)
            raw = bytearray(data)
            raw[pos] = (raw[pos] + rng.randrange(1, 256)) % 256
            tampers += 1
            try:
                ev.load_bytes_verified(bytes(raw))
                undetected += 1
            except (ev.SchemaViolation, ev.ChainBroken):
                pass
    record(9, mismatches == 0 and round_trip_failures == 0 and undetected == 0,
           f"100 packages: {mismatches} replay mismatches, {round_trip_failures} round-trip failures, "
           f"{undetected} of {tampers} single-byte tampers undetected")


def test_criterion_09_exhaustive_tamper_on_one_package():
    spec = ChartSpec("bar", [Series("SALES", (31, 119, 180), [3.0, 4.55])], ["A", "B"], [(0.0, 6.0)], 0.5, False)
    image, _ = synthgen.render(spec)
    pkg = orch.run_episode(image, parse_question("What is the SALES of B?"), seed=0).package
    data = ev.serialize(pkg)
    s, e = _item_spans(data, len(pkg.items))[0]
    for pos in range(s, e):
        raw = bytearray(data)
        raw[pos] ^= 0x01
        with pytest.raises((ev.SchemaViolation, ev.ChainBroken)):
            ev.load_bytes_verified(bytes(raw))


# ---------------------------------------------------------------- 10


def test_criterion_10_grouptalk_properties():
    rng = random.Random(10)
    cands = [AnswerCandidate("label", c) for c in "ABCDE"]
    failures = {"unanimity": 0, "low temperature": 0, "order": 0}
    for _ in range(500):
        n_exp, n_c = rng.randint(1, 5), rng.randint(2, 5)
        experts = [f"e{i}" for i in range(n_exp)]
        # unanimity: every expert ranks one candidate strictly highest
        win = rng.randrange(n_c)
        votes = []
        for e in experts:
            conf = rng.random()
            for j in range(n_c):
                s = rng.uniform(0.6, 1.0) if j == win else rng.uniform(0.0, 0.5)
                votes.append(gt.Vote(e, cands[j], s, conf))
        if gt.aggregate(votes, rng.uniform(0.05, 5.0)).candidate != cands[win]:
            failures["unanimity"] += 1
        # low-temperature limit: equal weights, raw scores at least 0.001 apart, so at
        # temperature 1e-6 each expert's softmax is exactly one-hot and ties fall to canonical order
        raw = {e: rng.sample(range(1, 1000), n_c) for e in experts}
        votes = [gt.Vote(e, cands[j], raw[e][j] / 1000, 0.5) for e in experts for j in range(n_c)]
        tops = [max(range(n_c), key=lambda j: raw[e][j]) for e in experts]
        counts = [tops.count(j) for j in range(n_c)]
        best = max(counts)
        expected = next(cands[j] for j in range(n_c) if counts[j] == best)
        if gt.aggregate(votes, 1e-6).candidate != expected:
            failures["low temperature"] += 1
        # order invariance on arbitrary ballots
        votes = [gt.Vote(e, cands[j], rng.random(), rng.random()) for e in experts for j in range(n_c)]
        shuffled = votes[:]
        rng.shuffle(shuffled)
        a, b = gt.aggregate(votes), gt.aggregate(shuffled)
        if (a.candidate, a.aggregate_score, a.margin) != (b.candidate, b.aggregate_score, b.margin):
            failures["order"] += 1
    record(10, not any(failures.values()), "500 vote sets each; failures " + ", ".join(f"{k}={v}" for k, v in failures.items()))


# ---------------------------------------------------------------- 11


def test_criterion_11_rms_f1_oracle():
    rng = random.Random(11)
    mismatches = 0
    for _ in range(200):
        def table():
            rows = rng.sample(["A", "B", "C", "D", "AB"], rng.randint(0, 4))
            cols = rng.sample(["S", "T", "ST", "U"], rng.randint(1, 4))
            return [(r, c, round(rng.uniform(-50, 50), rng.choice([0, 1, 2]))) for r in rows for c in cols]

        pred, truth = table(), table()
        if truth and rng.random() < 0.5:  # a noisy copy of the truth
            pred = [(r, c, v * rng.uniform(0.8, 1.2)) for r, c, v in truth]
            rng.shuffle(pred)
        if bench.rms_f1(pred, truth) != oracles.brute_rms_f1(pred, truth):
            mismatches += 1
    record(11, mismatches == 0, f"{mismatches} mismatches against exhaustive matching over 200 table pairs")
