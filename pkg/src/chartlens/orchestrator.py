"""Tool registry, directive protocol, caches and the plan-execute-reflect loop."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Protocol, Sequence

from chartlens import evidence as ev
from chartlens import grouptalk as gt
from chartlens import scheduler as sch
from chartlens.image import ChartImage
from chartlens.qtypes import CHART_TO_TABLE, AnswerCandidate, Question, seed_candidates

STATE_CAP_BYTES = 2048
PARAM_TYPES = ("int", "float", "str", "bool", "list", "any")


class DuplicateName(ValueError):
    pass


class InvalidSchema(ValueError):
    pass


class QuotaExceeded(RuntimeError):
    pass


class BudgetExceeded(RuntimeError):
    pass


class ParamValidationFailure(ValueError):
    pass


class ToolError(RuntimeError):
    """A tool raised while running; recorded as evidence, never fatal."""


# ---------------------------------------------------------------- schema


@dataclass(frozen=True)
class ParamField:
    name: str
    type: str = "any"
    required: bool = False
    default: Any = None
    choices: tuple | None = None
    description: str = ""

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "type": self.type,
            "required": self.required,
            "default": self.default,
            "choices": list(self.choices) if self.choices is not None else None,
            "description": self.description,
        }


@dataclass(frozen=True)
class Observation:
    """One value fed to the belief through ``model``."""

    model: sch.ObservationModel
    value: Any


@dataclass
class ToolOutput:
    summary: str
    artifacts: list[ev.Artifact] = field(default_factory=list)
    state: dict = field(default_factory=dict)
    observations: list[Observation] = field(default_factory=list)


Executor = Callable[[Any, dict], ToolOutput]


@dataclass(frozen=True)
class ToolSpec:
    name: str
    description: str
    params: tuple[ParamField, ...] = ()
    cost: float = 1.0
    prior_gain: float | Mapping[str, float] = 0.5
    quota: int = 3
    compatibility: frozenset[str] = frozenset()
    tasks: frozenset[str] = frozenset()
    model: sch.ObservationModel | None = None  # simulated tools expose their channel
    ready: Callable[[Any], bool] | None = field(default=None, compare=False)
    default_params: Callable[[Any], dict] | None = field(default=None, compare=False)

    def schema(self) -> dict:
        g0 = dict(self.prior_gain) if isinstance(self.prior_gain, Mapping) else self.prior_gain
        return {
            "name": self.name,
            "description": self.description,
            "params": [p.to_dict() for p in self.params],
            "cost": self.cost,
            "prior_gain": g0,
            "quota": self.quota,
            "compatibility": sorted(self.compatibility),
            "tasks": sorted(self.tasks),
        }


def validate_spec(spec: ToolSpec) -> None:
    if not spec.name or not re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", spec.name):
        raise InvalidSchema(f"bad tool name {spec.name!r}")
    if not (isinstance(spec.cost, (int, float)) and math.isfinite(spec.cost) and spec.cost >= 0):
        raise InvalidSchema(f"{spec.name}: cost must be a nonnegative real")
    if not isinstance(spec.quota, int) or spec.quota < 1:
        raise InvalidSchema(f"{spec.name}: quota must be at least 1")
    gains = spec.prior_gain.values() if isinstance(spec.prior_gain, Mapping) else [spec.prior_gain]
    if any(not (isinstance(g, (int, float)) and g >= 0) for g in gains):
        raise InvalidSchema(f"{spec.name}: prior gains must be nonnegative")
    seen = set()
    for p in spec.params:
        if p.type not in PARAM_TYPES:
            raise InvalidSchema(f"{spec.name}.{p.name}: unknown type {p.type!r}")
        if p.name in seen:
            raise InvalidSchema(f"{spec.name}: duplicate parameter {p.name!r}")
        seen.add(p.name)


def _check_type(value: Any, kind: str) -> bool:
    if kind == "any":
        return True
    if kind == "bool":
        return isinstance(value, bool)
    if kind == "int":
        return isinstance(value, int) and not isinstance(value, bool)
    if kind == "float":
        return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)
    if kind == "str":
        return isinstance(value, str)
    return isinstance(value, list)


def validate_params(spec: ToolSpec, params: Mapping[str, Any]) -> dict:
    """Check ``params`` against the schema and fill defaults."""
    if not isinstance(params, Mapping):
        raise ParamValidationFailure(f"{spec.name}: params must be an object")
    known = {p.name: p for p in spec.params}
    extra = sorted(set(params) - set(known))
    if extra:
        raise ParamValidationFailure(f"{spec.name}: unknown parameters {extra}")
    out = {}
    for p in spec.params:
        if p.name not in params or params[p.name] is None:
            if p.required:
                raise ParamValidationFailure(f"{spec.name}: missing required parameter {p.name!r}")
            if p.default is not None:
                out[p.name] = p.default
            continue
        v = params[p.name]
        if not _check_type(v, p.type):
            raise ParamValidationFailure(f"{spec.name}.{p.name}: expected {p.type}, got {type(v).__name__}")
        if p.choices is not None and v not in p.choices:
            raise ParamValidationFailure(f"{spec.name}.{p.name}: {v!r} not in {list(p.choices)}")
        out[p.name] = v
    return out


# ---------------------------------------------------------------- registry


class Registry:
    """Ordered tool table; registration order is the tie-break order.

    ``context_factory(image, meta)`` builds the per-episode tool context; it
    is also what replay uses to rebuild a fresh one.
    """

    def __init__(self, context_factory: Callable[[ChartImage, dict], Any] | None = None) -> None:
        self._specs: dict[str, ToolSpec] = {}
        self._exec: dict[str, Executor] = {}
        self._factory = context_factory or (lambda image, meta: ToolContext(image, meta))
        self._frozen = False

    def register(self, spec: ToolSpec, executor: Executor) -> "Registry":
        if self._frozen:
            raise InvalidSchema("registry is frozen")
        validate_spec(spec)
        if spec.name in self._specs:
            raise DuplicateName(spec.name)
        if not callable(executor):
            raise InvalidSchema(f"{spec.name}: executor is not callable")
        self._specs[spec.name] = spec
        self._exec[spec.name] = executor
        return self

    def freeze(self) -> "Registry":
        self._frozen = True
        return self

    def names(self) -> list[str]:
        return list(self._specs)

    def specs(self) -> list[ToolSpec]:
        return list(self._specs.values())

    def spec(self, name: str) -> ToolSpec:
        try:
            return self._specs[name]
        except KeyError:
            raise sch.UnregisteredTool(name) from None

    def __contains__(self, name: str) -> bool:
        return name in self._specs

    def __len__(self) -> int:
        return len(self._specs)

    def action_space(self) -> list[str]:
        return self.names() + ["finish"]

    def new_context(self, image: ChartImage, meta: dict) -> Any:
        return self._factory(image, meta)

    def invoke(self, name: str, params: dict, ctx: Any) -> ToolOutput:
        """Run one tool; any exception comes back as ``ToolError``."""
        try:
            out = self._exec[name](ctx, params)
        except Exception as exc:  # noqa: BLE001 - error-as-evidence contract
            raise ToolError(f"{type(exc).__name__}: {exc}") from exc
        if not isinstance(out, ToolOutput):
            raise ToolError(f"{name} returned {type(out).__name__}, not ToolOutput")
        return out

    def replay_call(self, name: str, params: dict, ctx: Any, item_id: int) -> tuple[str, str, list[ev.Artifact]]:
        if hasattr(ctx, "item_id"):
            ctx.item_id = item_id
        try:
            out = self.invoke(name, dict(params), ctx)
        except ToolError as exc:
            return "error", str(exc), []
        return "ok", out.summary, out.artifacts


@dataclass
class ToolContext:
    """Minimal per-episode context; richer contexts add a workspace."""

    image: ChartImage
    meta: dict
    item_id: int = 0
    workspace: dict = field(default_factory=dict)

    @property
    def question(self) -> Question | None:
        q = self.meta.get("question")
        return Question.from_dict(q) if q else None


# ---------------------------------------------------------------- directives


@dataclass(frozen=True)
class Directive:
    kind: str  # "tool_call" | "finish"
    tool_name: str | None = None
    params: dict | None = None
    rationale: str = ""
    answer: Any = None
    incomplete: bool = False

    def __post_init__(self) -> None:
        if self.kind == "tool_call" and (not self.tool_name or self.params is None):
            raise ValueError("tool_call needs a tool name and params")
        if self.kind == "finish" and self.answer is None and not self.incomplete:
            raise ValueError("finish needs an answer or the incomplete flag")
        if self.kind not in ("tool_call", "finish"):
            raise ValueError(f"unknown directive kind {self.kind!r}")

    def render(self) -> str:
        if self.kind == "tool_call":
            body = {"name": self.tool_name, "params": self.params, "rationale": self.rationale}
            return "<tool_call>" + json.dumps(body, sort_keys=True) + "</tool_call>"
        body = {"answer": self.answer}
        if self.incomplete:
            body["incomplete"] = True
        return "<finish>" + json.dumps(body, sort_keys=True) + "</finish>"


@dataclass(frozen=True)
class ParseFailure:
    text: str
    reason: str


_DIRECTIVE_RE = re.compile(r"^\s*<(tool_call|finish)>(.*)</\1>\s*$", re.S)


def parse_directive(text: Any) -> Directive | ParseFailure:
    """Parse a directive string; malformed input is returned as ParseFailure."""
    if not isinstance(text, str):
        return ParseFailure(repr(text), "directive is not a string")
    m = _DIRECTIVE_RE.match(text)
    if not m:
        return ParseFailure(text, "no <tool_call> or <finish> envelope")
    kind, body = m.group(1), m.group(2)
    try:
        data = json.loads(body)
    except ValueError as exc:
        return ParseFailure(text, f"bad JSON body: {exc}")
    if not isinstance(data, dict):
        return ParseFailure(text, "body must be a JSON object")
    try:
        if kind == "tool_call":
            name, params = data.get("name"), data.get("params")
            if not isinstance(name, str) or not isinstance(params, dict):
                return ParseFailure(text, "tool_call needs a string name and an object params")
            rationale = data.get("rationale") or ""
            return Directive("tool_call", name, params, str(rationale))
        return Directive("finish", answer=data.get("answer"), incomplete=bool(data.get("incomplete", False)))
    except ValueError as exc:
        return ParseFailure(text, str(exc))


# ---------------------------------------------------------------- caches


@dataclass(frozen=True)
class HistoryEntry:
    order: int
    tool: str
    params: dict
    summary: str
    cost: float
    evidence_id: int

    def to_dict(self) -> dict:
        return {
            "order": self.order,
            "tool": self.tool,
            "params": self.params,
            "summary": self.summary,
            "cost": self.cost,
            "evidence_id": self.evidence_id,
        }


@dataclass
class HistoryCache:
    entries: list[HistoryEntry] = field(default_factory=list)

    def add(self, tool: str, params: dict, summary: str, cost: float, evidence_id: int) -> HistoryEntry:
        e = HistoryEntry(len(self.entries) + 1, tool, dict(params), summary, float(cost), evidence_id)
        self.entries.append(e)
        return e

    def count(self, tool: str) -> int:
        return sum(1 for e in self.entries if e.tool == tool)

    def total_cost(self) -> float:
        return math.fsum(e.cost for e in self.entries)

    def digest(self, last: int = 8) -> list[dict]:
        return [{"order": e.order, "tool": e.tool, "summary": e.summary[:160]} for e in self.entries[-last:]]

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class StateCache:
    """Latest compressed summary per tool, each capped at ``cap`` bytes."""

    cap: int = STATE_CAP_BYTES
    entries: dict[str, dict] = field(default_factory=dict)

    def update(self, tool: str, summary: Mapping[str, Any], evidence_id: int) -> dict:
        entry = {"evidence_id": evidence_id, **ev.canonical(dict(summary))}
        entry = _compress(entry, self.cap)
        self.entries[tool] = entry
        return entry

    def size(self, tool: str) -> int:
        return len(ev.canonical_bytes(self.entries[tool])) if tool in self.entries else 0

    def total_size(self) -> int:
        return sum(self.size(t) for t in self.entries)

    def to_dict(self) -> dict:
        return {k: self.entries[k] for k in sorted(self.entries)}


def _compress(entry: dict, cap: int) -> dict:
    if len(ev.canonical_bytes(entry)) <= cap:
        return entry
    # keep scalars, shorten long lists, and as a last resort keep only the reference
    out = {}
    for k, v in entry.items():
        if isinstance(v, list) and len(v) > 4:
            out[k] = v[:4] + [f"... {len(v) - 4} more"]
        elif isinstance(v, str) and len(v) > 200:
            out[k] = v[:200] + "..."
        elif isinstance(v, dict) and len(ev.canonical_bytes(v)) > cap // 4:
            out[k] = {"omitted_keys": sorted(v)[:8]}
        else:
            out[k] = v
    out["truncated"] = True
    if len(ev.canonical_bytes(out)) <= cap:
        return out
    return {"evidence_id": entry["evidence_id"], "truncated": True}


# ---------------------------------------------------------------- planners


@dataclass
class PlannerView:
    question: Question
    state: dict
    history: list[dict]
    schemas: list[dict]
    quota_left: dict[str, int]
    scores: list[tuple[str, float]]
    costs: dict[str, float]
    cumulative_cost: float
    round: int
    config: sch.SchedulerConfig
    belief: sch.Belief
    default_params: dict[str, dict]


class Planner(Protocol):
    def propose(self, view: PlannerView) -> str:
        ...


class EigPlanner:
    """The built-in policy: argmax gain minus weighted cost, with the stop rule."""

    def propose(self, view: PlannerView) -> str:
        if not view.scores:
            return Directive("finish", incomplete=True, rationale="no tools").render()
        act = sch.select_action(view.scores, view.costs, view.config, view.cumulative_cost, view.round)
        if act.kind == "finish":
            return Directive("finish", incomplete=True, rationale=act.reason).render()
        rationale = f"net gain {act.net_gain:.4f}"
        return Directive("tool_call", act.tool, view.default_params.get(act.tool, {}), rationale).render()


class ScriptedPlanner:
    """Replays a fixed list of directive strings, then finishes."""

    def __init__(self, directives: Sequence[str]) -> None:
        self._script = list(directives)
        self._i = 0

    def propose(self, view: PlannerView) -> str:
        if self._i >= len(self._script):
            return Directive("finish", incomplete=True).render()
        text = self._script[self._i]
        self._i += 1
        return text


# ---------------------------------------------------------------- episode


@dataclass
class EpisodeState:
    ctx: Any
    registry: Registry
    config: sch.SchedulerConfig
    package: ev.EvidencePackage
    belief: sch.Belief
    history: HistoryCache = field(default_factory=HistoryCache)
    state: StateCache = field(default_factory=StateCache)
    cost: float = 0.0
    round: int = 0
    calls: dict[str, int] = field(default_factory=dict)
    parse_failures: int = 0

    def quota_left(self, name: str) -> int:
        return self.registry.spec(name).quota - self.calls.get(name, 0)


def _reading_artifacts_to_state(out: ToolOutput) -> dict:
    return dict(out.state) if out.state else {"summary": out.summary}


def execute_tool(call: Directive, st: EpisodeState) -> ToolOutput | None:
    """Run one validated call, charge it, record it and update the belief.

    Raises ``QuotaExceeded``, ``BudgetExceeded`` or ``ParamValidationFailure``
    before anything is charged. A tool that fails inside is recorded as an
    error item, charged, and reported by returning ``None``.
    """
    if call.kind != "tool_call":
        raise ValueError("execute_tool needs a tool_call directive")
    spec = st.registry.spec(call.tool_name)
    if st.quota_left(spec.name) <= 0:
        raise QuotaExceeded(f"{spec.name} used its quota of {spec.quota}")
    if st.cost + spec.cost > st.config.budget + 1e-12:
        raise BudgetExceeded(f"{spec.name} costs {spec.cost}, only {st.config.budget - st.cost:.6g} left")
    params = validate_params(spec, call.params or {})
    item_id = len(st.package.items) + 1
    if hasattr(st.ctx, "item_id"):
        st.ctx.item_id = item_id
    st.calls[spec.name] = st.calls.get(spec.name, 0) + 1
    st.cost += spec.cost
    try:
        out = st.registry.invoke(spec.name, params, st.ctx)
    except ToolError as exc:
        ev.append(st.package, step=st.round, tool=spec.name, params=params, summary=str(exc), status="error")
        st.history.add(spec.name, params, str(exc), spec.cost, item_id)
        st.state.update(spec.name, {"error": str(exc)}, item_id)
        return None
    ev.append(st.package, step=st.round, tool=spec.name, params=params, summary=out.summary, artifacts=out.artifacts)
    st.history.add(spec.name, params, out.summary, spec.cost, item_id)
    st.state.update(spec.name, _reading_artifacts_to_state(out), item_id)
    for obs in out.observations:
        st.belief = sch.posterior(st.belief, obs.model, obs.value)
    return out


@dataclass
class EpisodeResult:
    answer: Any
    belief: sch.Belief
    package: ev.EvidencePackage
    calls: int
    cost: float
    incomplete: bool
    verdict: gt.Verdict | None = None
    confidence: float = 0.0
    trace: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "answer": self.answer,
            "confidence": self.confidence,
            "belief": self.belief.to_dict(),
            "calls": self.calls,
            "cost": self.cost,
            "incomplete": self.incomplete,
            "verdict": self.verdict.to_dict() if self.verdict else None,
            "evidence_head": self.package.head,
            "trace": list(self.trace),
        }

    def to_json(self) -> str:
        return ev.canonical_bytes(self.to_dict()).decode("utf-8")


def _score_tools(st: EpisodeState, question: Question) -> tuple[list[tuple[str, float]], dict[str, float], dict[str, dict]]:
    scores, costs, params = [], {}, {}
    chart_type = st.ctx.workspace.get("chart_type") if hasattr(st.ctx, "workspace") else None
    for spec in st.registry.specs():
        if st.quota_left(spec.name) <= 0:
            continue
        if spec.model is not None:
            g = sch.eig_exact(st.belief, spec.model)
        else:
            ready = spec.ready(st.ctx) if spec.ready is not None else True
            g = sch.eig_heuristic(spec, st.history, chart_type, st.config.gain_decay, task=question.task, ready=ready)
        scores.append((spec.name, g))
        costs[spec.name] = spec.cost
        if spec.default_params is not None:
            try:
                params[spec.name] = spec.default_params(st.ctx)
            except Exception:  # noqa: BLE001 - a planner hint, never fatal
                params[spec.name] = {}
        else:
            params[spec.name] = {}
    return scores, costs, params


def _converged(question: Question, belief: sch.Belief, ctx: Any) -> bool:
    cand, p = belief.top()
    if cand is None:
        return False
    if question.task == CHART_TO_TABLE:
        table = getattr(ctx, "workspace", {}).get("table")
        return table is not None and table.is_complete()
    return p >= 0.5


def _answer_value(cand: AnswerCandidate | None, question: Question, ctx: Any) -> Any:
    if cand is None:
        return None
    if cand.kind == "table":
        table = getattr(ctx, "workspace", {}).get("table")
        return table.to_dict() if table is not None else None
    return cand.value


def _remedial_tool(st: EpisodeState, question: Question) -> str | None:
    """A compatible, affordable tool with quota left, preferring ones not yet tried."""
    chart_type = st.ctx.workspace.get("chart_type") if hasattr(st.ctx, "workspace") else None
    best = None
    for spec in st.registry.specs():
        if st.quota_left(spec.name) <= 0 or st.cost + spec.cost > st.config.budget + 1e-12:
            continue
        if chart_type and spec.compatibility and chart_type not in spec.compatibility:
            continue
        if spec.tasks and question.task not in spec.tasks:
            continue
        if spec.ready is not None and not spec.ready(st.ctx) and spec.model is None:
            continue
        if spec.model is not None:
            g = sch.eig_exact(st.belief, spec.model)
        else:
            g = sch.eig_heuristic(spec, None, chart_type, st.config.gain_decay)
        key = (st.calls.get(spec.name, 0) == 0, g - st.config.lam * spec.cost)
        if g > 0 and (best is None or key > best[0]):
            best = (key, spec.name)
    return best[1] if best else None


def _vote_round(st: EpisodeState, question: Question, experts, temperature: float) -> gt.Verdict | None:
    if not st.belief.candidates:
        return None
    votes = gt.collect_votes(experts, st.belief, st.package, question)
    if not votes:
        return None
    verdict = gt.aggregate(votes, temperature)
    ev.append(
        st.package,
        step=st.round,
        tool="grouptalk",
        params={"temperature": temperature},
        summary=f"verdict {verdict.candidate} score {verdict.aggregate_score:.4f} margin {verdict.margin:.4f}",
        artifacts=[ev.Artifact.inline("vote_log", {"votes": [v.to_dict() for v in votes], "verdict": verdict.to_dict()})],
        status="vote",
    )
    return verdict


def run_episode(
    image: ChartImage,
    question: Question,
    config: sch.SchedulerConfig | None = None,
    planner: Planner | None = None,
    registry: Registry | None = None,
    *,
    seed: int = 0,
    meta: Mapping[str, Any] | None = None,
    prior: sch.Belief | None = None,
    experts: Sequence[gt.Expert] | None = None,
    temperature: float = gt.DEFAULT_TEMPERATURE,
    margin_threshold: float = gt.DEFAULT_MARGIN,
    remedial_budget: int = 1,
) -> EpisodeResult:
    """Plan, execute and reflect until the stop rule fires; always returns a result."""
    config = config or sch.SchedulerConfig()
    planner = planner or EigPlanner()
    if registry is None:
        from chartlens.tools import default_registry

        registry = default_registry()
    experts = list(experts) if experts is not None else gt.default_experts()
    pkg_meta = {
        "image_digest": image.digest(),
        "question": question.to_dict(),
        "config": config.to_dict(),
        "seed": int(seed),
        "temperature": temperature,
        "margin_threshold": margin_threshold,
    }
    pkg_meta.update(dict(meta or {}))
    package = ev.EvidencePackage(ev.canonical(pkg_meta))
    ctx = registry.new_context(image, package.meta)
    belief = prior if prior is not None else seed_candidates(question)[1]
    st = EpisodeState(ctx, registry, config, package, belief)
    trace: list[str] = []
    finish_answer = None

    while st.cost < config.budget and st.round < config.max_rounds:
        scores, costs, params = _score_tools(st, question)
        view = PlannerView(
            question,
            st.state.to_dict(),
            st.history.digest(),
            [s.schema() for s in registry.specs()],
            {n: st.quota_left(n) for n in registry.names()},
            scores,
            costs,
            st.cost,
            st.round,
            config,
            st.belief,
            params,
        )
        text = planner.propose(view)
        d = parse_directive(text)
        st.round += 1
        if isinstance(d, ParseFailure):
            st.parse_failures += 1
            trace.append(f"parse_failure: {d.reason}")
            ev.append(package, step=st.round, tool="planner", params={}, summary=f"unparseable directive: {d.reason}", status="rejected")
            continue
        if d.kind == "finish":
            finish_answer = d.answer
            trace.append("finish" + (f" ({d.rationale})" if d.rationale else ""))
            break
        if d.tool_name not in registry:
            trace.append(f"rejected unknown tool {d.tool_name}")
            ev.append(package, step=st.round, tool="planner", params={"name": d.tool_name}, summary="unknown tool", status="rejected")
            continue
        try:
            out = execute_tool(d, st)
        except (QuotaExceeded, BudgetExceeded, ParamValidationFailure) as exc:
            trace.append(f"rejected {d.tool_name}: {exc}")
            ev.append(package, step=st.round, tool=d.tool_name, params={}, summary=f"{type(exc).__name__}: {exc}", status="rejected")
            continue
        trace.append(f"{d.tool_name}: {'error' if out is None else out.summary}")

    verdict = _vote_round(st, question, experts, temperature)
    remedial_left = remedial_budget
    if verdict is not None:
        conflicts = gt.detect_conflicts(package)
        if gt.needs_arbitration(verdict, conflicts, margin_threshold) and remedial_left > 0:
            remedial_left -= 1
            tool = _remedial_tool(st, question)
            ev.append(
                package,
                step=st.round,
                tool="arbitration",
                params={"margin": verdict.margin, "conflicts": conflicts, "threshold": margin_threshold},
                summary=f"arbitration triggered; remedial call: {tool or 'none available'}",
                status="arbitration",
            )
            trace.append(f"arbitration: {tool or 'none'}")
            if tool is not None:
                spec = registry.spec(tool)
                d = Directive("tool_call", tool, spec.default_params(st.ctx) if spec.default_params else {}, "remedial")
                try:
                    execute_tool(d, st)
                except (QuotaExceeded, BudgetExceeded, ParamValidationFailure) as exc:
                    trace.append(f"remedial rejected: {exc}")
            revote = _vote_round(st, question, experts, temperature)
            if revote is not None:
                verdict = gt.Verdict(revote.candidate, revote.aggregate_score, revote.margin, True, revote.scores, revote.weights)

    converged = verdict is not None and _converged(question, st.belief, ctx)
    answer = _answer_value(verdict.candidate if verdict else None, question, ctx)
    if answer is None and finish_answer is not None:
        answer = finish_answer
    confidence = st.belief.prob_of(verdict.candidate) if verdict else 0.0
    incomplete = not converged
    final = {
        "answer": answer,
        "confidence": confidence,
        "verdict": verdict.to_dict() if verdict else None,
        "belief": st.belief.to_dict(),
        "calls": len(st.history),
        "cost": st.cost,
    }
    if incomplete:
        # fallback: whatever was gathered so far stays auditable
        final["intermediate"] = st.state.to_dict()
    package.final = ev.canonical(final)
    package.incomplete = incomplete
    return EpisodeResult(answer, st.belief, package, len(st.history), st.cost, incomplete, verdict, confidence, trace)
