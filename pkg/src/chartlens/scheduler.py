"""Belief state, information gain and the cost-aware stopping policy.

Entropies are in nats. A belief spreads mass over explicit candidates plus
one ``residual`` bucket standing for "some answer not yet proposed".
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from chartlens.qtypes import AnswerCandidate

SIMPLEX_TOL = 1e-12
ROW_TOL = 1e-9
MERGE_REL = 0.005
RESIDUAL = None  # sentinel passed to likelihoods for the residual bucket


class ZeroEvidence(ValueError):
    pass


class NonEnumerable(ValueError):
    pass


class UnregisteredTool(KeyError):
    pass


class InvalidConfig(ValueError):
    pass


# ---------------------------------------------------------------- belief


@dataclass(frozen=True)
class Belief:
    candidates: tuple[AnswerCandidate, ...]
    probs: tuple[float, ...]
    residual: float = 0.0
    flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "candidates", tuple(self.candidates))
        object.__setattr__(self, "probs", tuple(float(p) for p in self.probs))
        object.__setattr__(self, "residual", float(self.residual))
        if len(self.candidates) != len(self.probs):
            raise ValueError("candidates and probs differ in length")
        if len(set(self.candidates)) != len(self.candidates):
            raise ValueError("candidates must be unique")
        if any(p < 0 or not math.isfinite(p) for p in self.probs) or not (0 <= self.residual <= 1):
            raise ValueError("probabilities must be finite and nonnegative")
        total = math.fsum(self.probs) + self.residual
        if abs(total - 1.0) > SIMPLEX_TOL * max(1, len(self.probs)) * 10:
            raise ValueError(f"belief mass sums to {total!r}, not 1")

    @classmethod
    def normalized(cls, candidates: Sequence[AnswerCandidate], weights: Sequence[float], residual_w: float, flags=()) -> "Belief":
        total = math.fsum(weights) + residual_w
        if total <= 0:
            raise ZeroEvidence("no mass to normalize")
        probs = [w / total for w in weights]
        # rounding drift (a few ulps) is left in place rather than pushed onto one
        # entry, so equal weights stay exactly equal and ties are never broken
        residual = max(0.0, 1.0 - math.fsum(probs)) if residual_w > 0 else 0.0
        return cls(tuple(candidates), tuple(probs), residual, tuple(flags))

    def as_vector(self) -> list[float]:
        return list(self.probs) + [self.residual]

    def top(self) -> tuple[AnswerCandidate | None, float]:
        if not self.candidates:
            return None, 0.0
        i = max(range(len(self.probs)), key=lambda k: (self.probs[k], -k))
        return self.candidates[i], self.probs[i]

    def prob_of(self, cand: AnswerCandidate) -> float:
        try:
            return self.probs[self.candidates.index(cand)]
        except ValueError:
            return 0.0

    def to_dict(self) -> dict:
        return {
            "candidates": [c.to_dict() for c in self.candidates],
            "probs": list(self.probs),
            "residual_other": self.residual,
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Belief":
        return cls(
            tuple(AnswerCandidate.from_dict(c) for c in d["candidates"]),
            tuple(d["probs"]),
            d["residual_other"],
            tuple(d.get("flags", ())),
        )


def entropy(belief: Belief) -> float:
    """Shannon entropy in nats, with the residual counted as one outcome."""
    return -math.fsum(p * math.log(p) for p in belief.as_vector() if p > 0)


# ---------------------------------------------------------------- observation models


Likelihood = Callable[[Any, Any], float]


@dataclass(frozen=True)
class ObservationModel:
    """p(z | y) for one tool.

    ``likelihood(y, z)`` receives a candidate value (or ``None`` for the
    residual bucket). ``outcomes`` lists the observation space when it is
    discrete and enumerable. ``propose`` turns an observation into a new
    candidate when the reading names an answer directly.
    """

    tool: str
    likelihood: Likelihood
    outcomes: tuple | None = None
    noise: Mapping[str, float] = field(default_factory=dict)
    propose: Callable[[Any], AnswerCandidate | None] | None = None

    def check_rows(self, values: Iterable[Any]) -> None:
        if self.outcomes is None:
            raise NonEnumerable(f"{self.tool} has a continuous observation space")
        for y in list(values) + [RESIDUAL]:
            s = math.fsum(self.likelihood(y, z) for z in self.outcomes)
            if abs(s - 1.0) > ROW_TOL:
                raise ValueError(f"likelihood row for {y!r} sums to {s}")

    # constructors ---------------------------------------------------------

    @classmethod
    def discrete(cls, tool: str, table: Mapping[Any, Mapping[Any, float]], outcomes: Sequence, residual_row=None) -> "ObservationModel":
        """Explicit table ``table[y][z]``; the residual row defaults to uniform."""
        outs = tuple(outcomes)
        res = dict(residual_row) if residual_row is not None else {z: 1.0 / len(outs) for z in outs}

        def lik(y, z):
            row = res if y is RESIDUAL else table.get(y, res)
            return float(row.get(z, 0.0))

        return cls(tool, lik, outs)

    @classmethod
    def flip(cls, tool: str, labels: Sequence, p: float) -> "ObservationModel":
        """Reports the true label with prob 1-p, otherwise a uniform wrong one."""
        labs = tuple(labels)
        k = len(labs)
        if k < 2:
            raise ValueError("flip channel needs at least two labels")

        def lik(y, z):
            if y is RESIDUAL:
                return 1.0 / k
            return 1.0 - p if z == y else p / (k - 1)

        return cls(tool, lik, labs, {"flip": p})

    @classmethod
    def function(cls, tool: str, fn: Callable[[Any], Any], outcomes: Sequence, p_flip: float = 0.0) -> "ObservationModel":
        """Observes ``fn(y)`` through a symmetric flip channel on its range."""
        outs = tuple(outcomes)
        k = len(outs)

        def lik(y, z):
            if y is RESIDUAL:
                return 1.0 / k
            hit = fn(y) == z
            if k == 1:
                return 1.0
            return 1.0 - p_flip if hit else p_flip / (k - 1)

        return cls(tool, lik, outs, {"flip": p_flip})

    @classmethod
    def deterministic(cls, tool: str, labels: Sequence) -> "ObservationModel":
        return cls.flip(tool, labels, 0.0)

    @classmethod
    def uniform(cls, tool: str, outcomes: Sequence) -> "ObservationModel":
        outs = tuple(outcomes)
        return cls(tool, lambda y, z: 1.0 / len(outs), outs)

    @classmethod
    def gaussian(cls, tool: str, sigma_rel: float, sigma_abs: float = 1e-6, other_sigmas: float = 3.0) -> "ObservationModel":
        """Numeric reading z ~ N(y, s(y)) with s(y) = max(sigma_rel*|y|, sigma_abs).

        The residual bucket is given the density the reading would have at
        ``other_sigmas`` standard deviations, so a fresh reading outweighs
        "something else" without making it impossible.
        """

        def sd(v: float) -> float:
            return max(sigma_rel * abs(v), sigma_abs)

        def lik(y, z):
            z = float(z)
            if y is RESIDUAL:
                s = sd(z)
                return math.exp(-0.5 * other_sigmas**2) / (s * math.sqrt(2 * math.pi))
            y = float(y.value if isinstance(y, AnswerCandidate) else y)
            s = sd(y)
            return math.exp(-0.5 * ((z - y) / s) ** 2) / (s * math.sqrt(2 * math.pi))

        return cls(
            tool,
            lik,
            None,
            {"sigma_rel": sigma_rel, "sigma_abs": sigma_abs},
            propose=lambda z: AnswerCandidate("numeric", float(z)),
        )


# ---------------------------------------------------------------- posterior


def _near(a: AnswerCandidate, b: AnswerCandidate) -> bool:
    if a.kind != b.kind:
        return False
    if a.kind != "numeric":
        return a.value == b.value
    x, y = float(a.value), float(b.value)
    return abs(x - y) <= MERGE_REL * max(abs(x), abs(y)) or abs(x - y) <= 1e-12


def _lik_arg(c: AnswerCandidate) -> Any:
    return c if c.kind == "numeric" else c.value


def insert_candidate(belief: Belief, cand: AnswerCandidate) -> tuple[Belief, int]:
    """Add ``cand`` unless a nearby candidate exists; the newcomer takes half the residual."""
    for i, c in enumerate(belief.candidates):
        if _near(c, cand):
            return belief, i
    half = belief.residual / 2.0
    cands = belief.candidates + (cand,)
    probs = belief.probs + (half,)
    return Belief(cands, probs, belief.residual - half, belief.flags), len(cands) - 1


def posterior(belief: Belief, model: ObservationModel, observation: Any, strict: bool = False) -> Belief:
    """Bayes update, inserting a proposed candidate first when it is new.

    When every hypothesis gives the observation zero likelihood the belief
    comes back unchanged with a ``zero_evidence`` flag (or ``ZeroEvidence``
    is raised when ``strict``).
    """
    if model.propose is not None:
        proposed = model.propose(observation)
        if proposed is not None:
            belief, _ = insert_candidate(belief, proposed)
    weights = [p * model.likelihood(_lik_arg(c), observation) for c, p in zip(belief.candidates, belief.probs)]
    rw = belief.residual * model.likelihood(RESIDUAL, observation) if belief.residual > 0 else 0.0
    if math.fsum(weights) + rw <= 0:
        if strict:
            raise ZeroEvidence(f"observation {observation!r} impossible under every hypothesis")
        flags = belief.flags if "zero_evidence" in belief.flags else belief.flags + ("zero_evidence",)
        return replace(belief, flags=flags)
    return Belief.normalized(belief.candidates, weights, rw, belief.flags)


def _bayes_fixed(belief: Belief, model: ObservationModel, z: Any) -> tuple[float, list[float]]:
    """Joint column for outcome z over the fixed support; returns (p(z), unnormalized)."""
    col = [p * model.likelihood(_lik_arg(c), z) for c, p in zip(belief.candidates, belief.probs)]
    col.append(belief.residual * model.likelihood(RESIDUAL, z) if belief.residual > 0 else 0.0)
    return math.fsum(col), col


def _h(vec: Iterable[float]) -> float:
    return -math.fsum(p * math.log(p) for p in vec if p > 0)


def eig_exact(belief: Belief, model: ObservationModel) -> float:
    """Expected entropy reduction from one observation, enumerating outcomes.

    Candidates are held fixed while enumerating (no insertion), so the value
    equals the mutual information between the answer and the observation.
    """
    if model.outcomes is None:
        raise NonEnumerable(f"{model.tool} has no enumerable observation space")
    h0 = entropy(belief)
    expected = []
    for z in model.outcomes:
        pz, col = _bayes_fixed(belief, model, z)
        if pz <= 0:
            continue
        expected.append(pz * _h(c / pz for c in col))
    gain = h0 - math.fsum(expected)
    return min(max(gain, 0.0), h0)


# ---------------------------------------------------------------- heuristic gain


def eig_heuristic(
    tool: Any,
    history: Any,
    chart_type: str | None,
    gain_decay: float = 0.25,
    registry: Iterable[str] | None = None,
    task: str | None = None,
    ready: bool = True,
) -> float:
    """Declared prior gain, decayed per previous call and gated by applicability.

    ``tool`` needs ``name``, ``prior_gain`` (a number or a mapping from chart
    type to number, with optional "default"), ``compatibility`` and
    optionally ``tasks``. ``history`` needs ``count(name)``. The gate is zero
    for an incompatible chart type, for a task the tool does not serve, and
    when the tool's inputs are not yet available (``ready`` false).
    """
    if registry is not None and tool.name not in set(registry):
        raise UnregisteredTool(tool.name)
    g0 = tool.prior_gain
    if isinstance(g0, Mapping):
        g0 = g0.get(chart_type, g0.get("default", 0.0)) if chart_type is not None else g0.get("default", max(g0.values(), default=0.0))
    gate = 1.0
    compat = getattr(tool, "compatibility", None)
    if chart_type not in (None, "unknown") and compat and chart_type not in compat:
        gate = 0.0
    tasks = getattr(tool, "tasks", None)
    if task is not None and tasks and task not in tasks:
        gate = 0.0
    if not ready:
        gate = 0.0
    n = history.count(tool.name) if history is not None else 0
    return float(g0) * gain_decay**n * gate


# ---------------------------------------------------------------- policy


@dataclass(frozen=True)
class SchedulerConfig:
    lam: float = 0.2
    budget: float = 8.0
    eta: float = 0.05
    gain_decay: float = 0.25
    max_rounds: int = 16

    def __post_init__(self) -> None:
        for name in ("lam", "budget", "eta"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                raise InvalidConfig(f"{name} must be a nonnegative real, got {v!r}")
        if not (0 < self.gain_decay <= 1):
            raise InvalidConfig("gain_decay must lie in (0, 1]")
        if int(self.max_rounds) != self.max_rounds or self.max_rounds < 0:
            raise InvalidConfig("max_rounds must be a nonnegative integer")

    _KEYS = {"lambda": "lam", "lam": "lam", "budget": "budget", "eta": "eta", "gain_decay": "gain_decay", "max_rounds": "max_rounds"}

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any], base: "SchedulerConfig | None" = None) -> "SchedulerConfig":
        kw = {}
        for k, v in data.items():
            if k not in cls._KEYS:
                raise InvalidConfig(f"unknown config key {k!r}")
            attr = cls._KEYS[k]
            kw[attr] = int(v) if attr == "max_rounds" else float(v)
        return replace(base or cls(), **kw)

    @classmethod
    def from_file(cls, path: str | Path) -> "SchedulerConfig":
        """Load from JSON or from flat ``key=value`` lines (``#`` comments allowed)."""
        text = Path(path).read_text(encoding="utf-8")
        stripped = text.strip()
        if stripped.startswith("{"):
            try:
                data = json.loads(stripped)
            except ValueError as exc:
                raise InvalidConfig(f"bad JSON config: {exc}") from exc
        else:
            data = {}
            for line in text.splitlines():
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise InvalidConfig(f"expected key=value, got {line!r}")
                k, v = (s.strip() for s in line.split("=", 1))
                data[k] = v
        try:
            return cls.from_mapping(data)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, InvalidConfig):
                raise
            raise InvalidConfig(str(exc)) from exc

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "budget": self.budget, "eta": self.eta, "gain_decay": self.gain_decay, "max_rounds": self.max_rounds}


@dataclass(frozen=True)
class Action:
    kind: str  # "tool" or "finish"
    tool: str | None = None
    net_gain: float = 0.0
    reason: str = ""


def should_stop(best_net_gain: float, cumulative_cost: float, config: SchedulerConfig, round: int) -> bool:
    """Stop when the best net gain is at most eta, the budget is spent or rounds run out."""
    return best_net_gain <= config.eta or cumulative_cost >= config.budget or round >= config.max_rounds


def select_action(
    scores: Mapping[str, float] | Sequence[tuple[str, float]],
    costs: Mapping[str, float],
    config: SchedulerConfig,
    cumulative_cost: float = 0.0,
    round: int = 0,
) -> Action:
    """Pick argmax EIG - lambda*cost among affordable tools, or finish.

    ``scores`` order is the registry order and breaks ties. A tool whose
    cost would push spending past the budget is not a candidate, which keeps
    total charges within the budget.
    """
    items = list(scores.items()) if isinstance(scores, Mapping) else list(scores)
    if not items:
        raise ValueError("select_action needs at least one registered tool")
    best_name, best_net = None, -math.inf
    for name, eig in items:
        c = float(costs[name])
        if cumulative_cost + c > config.budget + 1e-12:
            continue
        net = float(eig) - config.lam * c
        if net > best_net:
            best_name, best_net = name, net
    if best_name is None:
        return Action("finish", None, 0.0, "budget")
    if should_stop(best_net, cumulative_cost, config, round):
        if cumulative_cost >= config.budget:
            reason = "budget"
        elif round >= config.max_rounds:
            reason = "max_rounds"
        else:
            reason = "low_gain"
        return Action("finish", None, best_net, reason)
    return Action("tool", best_name, best_net, "")
