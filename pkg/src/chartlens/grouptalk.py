"""Multi-expert reflection: ballots, normalization, weighting and arbitration.

Three rule experts look at the same episode from different angles. Each
expert's raw scores are softmax-normalized over the candidates at a
temperature, weighted by its own min-max rescaled confidences and summed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

from chartlens.evidence import EvidencePackage
from chartlens.qtypes import AnswerCandidate, Question
from chartlens.scheduler import Belief, _near

DEFAULT_TEMPERATURE = 1.0
DEFAULT_MARGIN = 0.1


class NoExperts(ValueError):
    pass


class EmptyVotes(ValueError):
    pass


@dataclass(frozen=True)
class Vote:
    expert_id: str
    candidate: AnswerCandidate
    score: float
    confidence: float
    rationale: str = ""
    cited_evidence: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not (0.0 <= self.score <= 1.0) or not (0.0 <= self.confidence <= 1.0):
            raise ValueError("score and confidence must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "expert_id": self.expert_id,
            "candidate": self.candidate.to_dict(),
            "score": self.score,
            "confidence": self.confidence,
            "rationale": self.rationale,
            "cited_evidence": list(self.cited_evidence),
        }


@dataclass(frozen=True)
class Verdict:
    candidate: AnswerCandidate
    aggregate_score: float
    margin: float
    arbitration_used: bool = False
    scores: tuple[tuple[AnswerCandidate, float], ...] = ()
    weights: tuple[tuple[str, AnswerCandidate, float], ...] = field(default=(), compare=False)

    def to_dict(self) -> dict:
        return {
            "candidate": self.candidate.to_dict(),
            "aggregate_score": self.aggregate_score,
            "margin": self.margin,
            "arbitration_used": self.arbitration_used,
            "scores": [{"candidate": c.to_dict(), "score": s} for c, s in self.scores],
            "weights": [{"expert_id": e, "candidate": c.to_dict(), "weight": w} for e, c, w in self.weights],
        }


class Expert(Protocol):
    expert_id: str

    def vote(self, belief: Belief, evidence: EvidencePackage, question: Question) -> list[Vote]:
        ...


# ---------------------------------------------------------------- evidence helpers


def readings(evidence: EvidencePackage) -> list[tuple[int, dict]]:
    """(item id, reading payload) for every successful reading in the package."""
    out = []
    for it in evidence.items:
        if it.status != "ok":
            continue
        for a in it.artifacts:
            if a.kind == "reading" and isinstance(a.payload, dict) and "candidate" in a.payload:
                out.append((it.id, a.payload))
    return out


def _supports(payload: dict, cand: AnswerCandidate) -> bool:
    try:
        return _near(AnswerCandidate.from_dict(payload["candidate"]), cand)
    except (KeyError, TypeError, ValueError):
        return False


def failed_tools(evidence: EvidencePackage) -> set[str]:
    return {it.tool for it in evidence.items if it.status == "error"}


def detect_conflicts(evidence: EvidencePackage) -> bool:
    """True when two sources read the same target and disagree beyond merge tolerance."""
    by_target: dict[str, list[tuple[str, AnswerCandidate]]] = {}
    for _, p in readings(evidence):
        try:
            cand = AnswerCandidate.from_dict(p["candidate"])
        except (KeyError, TypeError, ValueError):
            continue
        by_target.setdefault(str(p.get("target", "")), []).append((str(p.get("source", "")), cand))
    for rows in by_target.values():
        for i, (sa, ca) in enumerate(rows):
            for sb, cb in rows[i + 1 :]:
                if sa != sb and not _near(ca, cb):
                    return True
    return False


# ---------------------------------------------------------------- experts


class ToolExpert:
    """Judges each candidate by the quality of the tool outputs behind it."""

    expert_id = "tool"

    def vote(self, belief: Belief, evidence: EvidencePackage, question: Question) -> list[Vote]:
        rs = readings(evidence)
        failed = failed_tools(evidence)
        votes = []
        for cand in belief.candidates:
            support = [(i, p) for i, p in rs if _supports(p, cand)]
            if not support:
                votes.append(Vote(self.expert_id, cand, 0.0, 0.5, "no tool output supports it"))
                continue
            quality = max(float(p.get("confidence", 1.0)) for _, p in support)
            score = min(1.0, max(0.0, quality))
            conf = score
            sources = {str(p.get("source", "")) for _, p in support}
            if sources & failed:
                conf = min(conf, 0.5)
            votes.append(
                Vote(self.expert_id, cand, score, conf, f"best supporting reading quality {quality:.3f}", tuple(i for i, _ in support))
            )
        return votes


class SynthesisExpert:
    """Rewards candidates confirmed by several independent sources."""

    expert_id = "synthesis"

    def vote(self, belief: Belief, evidence: EvidencePackage, question: Question) -> list[Vote]:
        rs = readings(evidence)
        all_sources = {str(p.get("source", "")) for _, p in rs}
        n_src = max(len(all_sources), 1)
        votes = []
        for cand in belief.candidates:
            support = [(i, p) for i, p in rs if _supports(p, cand)]
            sources = {str(p.get("source", "")) for _, p in support}
            score = len(sources) / n_src
            conf = 1.0 if len(sources) >= 2 else 0.5
            votes.append(
                Vote(self.expert_id, cand, score, conf, f"confirmed by {len(sources)} of {n_src} sources", tuple(i for i, _ in support))
            )
        return votes


class BeliefExpert:
    """Votes with posterior mass; more confident when the belief is peaked."""

    expert_id = "belief"

    def vote(self, belief: Belief, evidence: EvidencePackage, question: Question) -> list[Vote]:
        vec = belief.as_vector()
        n = len(vec)
        h = -math.fsum(p * math.log(p) for p in vec if p > 0)
        conf = 1.0 if n <= 1 else max(0.0, min(1.0, 1.0 - h / math.log(n)))
        return [
            Vote(self.expert_id, c, max(0.0, min(1.0, p)), conf, f"posterior mass {p:.4f}")
            for c, p in zip(belief.candidates, belief.probs)
        ]


def default_experts() -> list[Expert]:
    return [ToolExpert(), SynthesisExpert(), BeliefExpert()]


def collect_votes(experts: Sequence[Expert], belief: Belief, evidence: EvidencePackage, question: Question) -> list[Vote]:
    if not experts:
        raise NoExperts("GroupTalk needs at least one expert")
    votes: list[Vote] = []
    for e in experts:
        votes.extend(e.vote(belief, evidence, question))
    return votes


# ---------------------------------------------------------------- aggregation


def _softmax(xs: Sequence[float], temperature: float) -> list[float]:
    m = max(xs)
    ex = [math.exp((x - m) / temperature) for x in xs]
    s = math.fsum(ex)
    return [e / s for e in ex]


def _rescale(confs: Sequence[float]) -> list[float]:
    lo, hi = min(confs), max(confs)
    if hi - lo <= 1e-12:
        return [1.0] * len(confs)
    return [(c - lo) / (hi - lo) for c in confs]


def aggregate(votes: Sequence[Vote], temperature: float = DEFAULT_TEMPERATURE) -> Verdict:
    """Temperature softmax per expert, min-max confidence weights, summed scores."""
    if not votes:
        raise EmptyVotes("no votes to aggregate")
    if not (temperature > 0):
        raise ValueError("temperature must be positive")
    by_expert: dict[str, dict[AnswerCandidate, Vote]] = {}
    for v in votes:
        # one ballot per (expert, candidate); a repeat keeps the canonical maximum
        slot = by_expert.setdefault(v.expert_id, {})
        prev = slot.get(v.candidate)
        if prev is None or (v.score, v.confidence) > (prev.score, prev.confidence):
            slot[v.candidate] = v
    totals: dict[AnswerCandidate, list[float]] = {}
    weights = []
    for eid in sorted(by_expert):
        ballots = sorted(by_expert[eid].values(), key=lambda v: v.candidate.sort_key())
        norm = _softmax([b.score for b in ballots], temperature)
        w = _rescale([b.confidence for b in ballots])
        for b, s, wi in zip(ballots, norm, w):
            totals.setdefault(b.candidate, []).append(wi * s)
            weights.append((eid, b.candidate, wi))
    ranked = sorted(((c, math.fsum(v)) for c, v in totals.items()), key=lambda t: t[0].sort_key())
    best_c, best_s = ranked[0]
    for c, s in ranked[1:]:
        if s > best_s:
            best_c, best_s = c, s
    others = [s for c, s in ranked if c != best_c]
    margin = best_s - max(others) if others else best_s
    return Verdict(best_c, best_s, max(0.0, margin), False, tuple(ranked), tuple(weights))


def needs_arbitration(verdict: Verdict, tool_conflicts: bool, margin_threshold: float = DEFAULT_MARGIN) -> bool:
    return verdict.margin < margin_threshold or bool(tool_conflicts)
