import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from chartlens import evidence as ev
from chartlens import grouptalk as gt
from chartlens.qtypes import AnswerCandidate, parse_question
from chartlens.scheduler import Belief

A, B = AnswerCandidate("label", "A"), AnswerCandidate("label", "B")
Q = parse_question("what is the value of A?")


def num(x):
    return AnswerCandidate("numeric", x)


def reading(pkg, source, value, conf=0.9, target="A|SALES", status="ok"):
    payload = {"candidate": num(value).to_dict(), "source": source, "target": target, "confidence": conf}
    arts = [ev.Artifact.inline("reading", payload)] if status == "ok" else []
    return ev.append(pkg, step=len(pkg.items), tool=source, summary=f"{source} {value}", artifacts=arts, status=status)


def test_three_experts_two_candidates_give_six_votes():
    pkg = ev.EvidencePackage()
    reading(pkg, "read_via_auxline", 4.55)
    belief = Belief((num(4.55), num(3.0)), (0.5, 0.25), 0.25)
    votes = gt.collect_votes(gt.default_experts(), belief, pkg, Q)
    assert len(votes) == 6
    assert {v.expert_id for v in votes} == {"tool", "synthesis", "belief"}
    assert all(set(v.cited_evidence) <= pkg.ids() for v in votes)


def test_no_experts():
    with pytest.raises(gt.NoExperts):
        gt.collect_votes([], Belief((A,), (1.0,)), ev.EvidencePackage(), Q)


def test_tool_expert_caps_confidence_after_failed_call():
    pkg = ev.EvidencePackage()
    reading(pkg, "read_via_auxline", 4.55, conf=0.95)
    reading(pkg, "read_via_auxline", 0.0, status="error")
    belief = Belief((num(4.55),), (0.5,), 0.5)
    (vote,) = gt.ToolExpert().vote(belief, pkg, Q)
    assert vote.confidence <= 0.5


def test_synthesis_expert_prefers_confirmed_candidate():
    pkg = ev.EvidencePackage()
    reading(pkg, "read_via_auxline", 4.55)
    reading(pkg, "read_text", 4.53)
    reading(pkg, "segment_sectors", 7.0, target="other")
    belief = Belief((num(4.55), num(7.0)), (0.4, 0.4), 0.2)
    votes = {v.candidate: v for v in gt.SynthesisExpert().vote(belief, pkg, Q)}
    assert votes[num(4.55)].score > votes[num(7.0)].score
    assert votes[num(4.55)].confidence > votes[num(7.0)].confidence


def test_conflict_detection():
    pkg = ev.EvidencePackage()
    reading(pkg, "read_via_auxline", 4.55)
    reading(pkg, "read_text", 4.53)
    assert not gt.detect_conflicts(pkg)
    reading(pkg, "segment_sectors", 6.0)
    assert gt.detect_conflicts(pkg)


def votes_from(table, conf=0.7):
    out = []
    for i, row in enumerate(table):
        for cand, s in zip((A, B), row):
            out.append(gt.Vote(f"e{i}", cand, s, conf))
    return out


def test_aggregate_worked_example():
    table = [(0.8, 0.2), (0.6, 0.4), (0.3, 0.7)]
    verdict = gt.aggregate(votes_from(table), 1.0)
    assert verdict.candidate == A
    soft = [math.exp(a) / (math.exp(a) + math.exp(b)) for a, b in table]
    assert verdict.aggregate_score == pytest.approx(sum(soft), abs=1e-12)
    assert verdict.margin == pytest.approx(sum(soft) - sum(1 - s for s in soft), abs=1e-12)


def test_aggregate_unanimous_and_empty():
    verdict = gt.aggregate(votes_from([(0.9, 0.1)] * 3))
    assert verdict.candidate == A and verdict.margin > 0
    with pytest.raises(gt.EmptyVotes):
        gt.aggregate([])


def test_low_temperature_majority_of_top_picks():
    table = [(0.51, 0.49), (0.52, 0.48), (0.0, 1.0)]
    assert gt.aggregate(votes_from(table), 1.0).candidate == B
    assert gt.aggregate(votes_from(table), 1e-3).candidate == A


def test_needs_arbitration_examples():
    v = gt.Verdict(A, 1.0, 0.4)
    assert not gt.needs_arbitration(v, False, 0.1)
    assert gt.needs_arbitration(gt.Verdict(A, 1.0, 0.05), False, 0.1)
    assert gt.needs_arbitration(v, True, 0.1)


cands = [AnswerCandidate("label", c) for c in "ABCD"]


@st.composite
def vote_sets(draw):
    n_exp = draw(st.integers(1, 4))
    n_c = draw(st.integers(1, 4))
    out = []
    for e in range(n_exp):
        for c in cands[:n_c]:
            out.append(gt.Vote(f"e{e}", c, draw(st.floats(0, 1)), draw(st.floats(0, 1))))
    return out


@settings(max_examples=200)
@given(vote_sets(), st.randoms(use_true_random=False))
def test_aggregate_order_invariant(votes, rnd):
    shuffled = list(votes)
    rnd.shuffle(shuffled)
    a, b = gt.aggregate(votes), gt.aggregate(shuffled)
    assert a.candidate == b.candidate
    assert a.aggregate_score == b.aggregate_score and a.margin == b.margin
    assert a.margin >= 0


@settings(max_examples=200)
@given(st.lists(st.floats(0.01, 1), min_size=2, max_size=4), st.floats(0.05, 1))
def test_scaling_one_expert_keeps_its_argmax(scores, k):
    mine = [gt.Vote("e", c, s, 0.5) for c, s in zip(cands, scores)]
    scaled = [gt.Vote("e", c, s * k, 0.5) for c, s in zip(cands, scores)]
    assert gt.aggregate(mine).candidate == gt.aggregate(scaled).candidate
