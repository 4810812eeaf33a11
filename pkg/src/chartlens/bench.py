"""Metrics, a simulated tool environment and the sweep harnesses."""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from chartlens import grouptalk as gt
from chartlens import scheduler as sch
from chartlens import synthgen
from chartlens.evidence import Artifact
from chartlens.image import ChartImage
from chartlens.orchestrator import Observation, Registry, ToolContext, ToolOutput, ToolSpec, run_episode
from chartlens.qtypes import AnswerCandidate, parse_question
from chartlens.reasoning import DataTable

EPSILON_FLOOR = 1e-9
RELAXED_TOL = 0.05


class UnpairedCorpora(ValueError):
    pass


class EmptyCorpus(ValueError):
    pass


# ---------------------------------------------------------------- metrics


def relaxed_accuracy(pred: Any, truth: float, tolerance: float = RELAXED_TOL, epsilon_floor: float = EPSILON_FLOOR) -> bool:
    """True when the relative error of ``pred`` is within ``tolerance``."""
    if not tolerance > 0:
        raise ValueError("tolerance must be positive")
    try:
        p, t = float(pred), float(truth)
    except (TypeError, ValueError):
        return False
    if not (math.isfinite(p) and math.isfinite(t)):
        return False
    return abs(p - t) / max(abs(t), epsilon_floor) <= tolerance


def _edit_distance(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def _triples(table: DataTable | Iterable) -> list[tuple[str, str, Any]]:
    if isinstance(table, DataTable):
        return table.triples()
    if isinstance(table, Mapping):
        return DataTable.from_dict(table).triples()
    return [(str(r), str(c), v) for r, c, v in table]


def key_similarity(a: tuple[str, str], b: tuple[str, str]) -> float:
    ka, kb = f"{a[0]} {a[1]}", f"{b[0]} {b[1]}"
    n = max(len(ka), len(kb))
    return 1.0 if n == 0 else 1.0 - _edit_distance(ka, kb) / n


def value_similarity(vp: Any, vt: Any, epsilon: float = EPSILON_FLOOR) -> float:
    try:
        p, t = float(vp), float(vt)
    except (TypeError, ValueError):
        return 1.0 if str(vp) == str(vt) else 0.0
    if not (math.isfinite(p) and math.isfinite(t)):
        return 0.0
    return 1.0 - min(1.0, abs(p - t) / max(abs(t), epsilon))


def pair_similarity(p: tuple, t: tuple) -> float:
    return key_similarity(p[:2], t[:2]) * value_similarity(p[2], t[2])


def similarity_matrix(pred: Sequence[tuple], truth: Sequence[tuple]) -> np.ndarray:
    return np.array([[pair_similarity(p, t) for t in truth] for p in pred], dtype=np.float64).reshape(len(pred), len(truth))


def _f1(total: float, n_pred: int, n_truth: int) -> float:
    if n_pred == 0 and n_truth == 0:
        return 1.0
    if n_pred == 0 or n_truth == 0:
        return 0.0
    prec, rec = total / n_pred, total / n_truth
    return 0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec)


def rms_f1(pred: DataTable | Iterable, truth: DataTable | Iterable) -> float:
    """Triple-level F1 under the optimal one-to-one matching."""
    p, t = _triples(pred), _triples(truth)
    if not p or not t:
        return _f1(0.0, len(p), len(t))
    sim = similarity_matrix(p, t)
    rows, cols = linear_sum_assignment(sim, maximize=True)
    total = math.fsum(sim[r, c] for r, c in zip(rows, cols))
    return _f1(total, len(p), len(t))


# ---------------------------------------------------------------- simulated tools


@dataclass(frozen=True)
class SimTool:
    """A tool whose channel is an explicit candidate-by-observation table."""

    name: str
    cost: float
    table: Mapping[Any, Mapping[Any, float]]
    outcomes: tuple
    quota: int = 4

    def __post_init__(self) -> None:
        for y, row in self.table.items():
            s = math.fsum(row.get(z, 0.0) for z in self.outcomes)
            if abs(s - 1.0) > 1e-9:
                raise ValueError(f"{self.name}: row {y!r} sums to {s}")
            if any(p < 0 for p in row.values()):
                raise ValueError(f"{self.name}: negative probability in row {y!r}")

    @property
    def model(self) -> sch.ObservationModel:
        return sch.ObservationModel.discrete(self.name, self.table, self.outcomes)

    def spec(self) -> ToolSpec:
        return ToolSpec(self.name, f"simulated channel {self.name}", (), self.cost, 0.0, self.quota, model=self.model)

    @classmethod
    def bit(cls, name: str, labels: Sequence[int], bit: int, flip: float, cost: float, quota: int = 4) -> "SimTool":
        """Observes bit ``bit`` of the label through a binary symmetric channel."""
        table = {y: {((y >> bit) & 1): 1.0 - flip, 1 - ((y >> bit) & 1): flip} for y in labels}
        return cls(name, cost, table, (0, 1), quota)

    @classmethod
    def oracle(cls, name: str, labels: Sequence[int], cost: float = 0.0, quota: int = 4) -> "SimTool":
        return cls(name, cost, {y: {y: 1.0} for y in labels}, tuple(labels), quota)


@dataclass
class SimEnvironment:
    tools: list[SimTool]
    prior: sch.Belief

    @property
    def labels(self) -> list[int]:
        return [c.value for c in self.prior.candidates]


def uniform_label_prior(labels: Sequence[int]) -> sch.Belief:
    cands = [AnswerCandidate("label", int(y)) for y in labels]
    return sch.Belief.normalized(cands, [1.0] * len(cands), 0.0)


def bit_environment(
    n_bits: int = 4,
    strong: tuple[float, float] = (1.0, 0.05),
    weak: tuple[float, float] | None = (0.25, 0.2),
    quota: int = 4,
) -> SimEnvironment:
    """Uniform labels 0..2^n-1; one strong and one weak reader per bit."""
    labels = list(range(2**n_bits))
    tools = [SimTool.bit(f"strong_{b}", labels, b, strong[1], strong[0], quota) for b in range(n_bits)]
    if weak is not None:
        tools += [SimTool.bit(f"weak_{b}", labels, b, weak[1], weak[0], quota) for b in range(n_bits)]
    return SimEnvironment(tools, uniform_label_prior(labels))


def hard_environment() -> SimEnvironment:
    """Seven informative reads (at least four) are needed before any label reaches 90% mass."""
    return bit_environment(4, strong=(1.0, 0.05), weak=(0.25, 0.2), quota=4)


def observations_needed(env: SimEnvironment, target: float = 0.9, max_n: int = 8) -> int | None:
    """Fewest noise-free-consistent observations that push the true label to ``target``.

    Searches every multiset of tool calls up to ``max_n`` with the truth fixed
    at the first label and each tool reporting its most likely outcome.
    """
    truth = env.prior.candidates[0]
    for n in range(0, max_n + 1):
        for combo in itertools.combinations_with_replacement(env.tools, n):
            b = env.prior
            for t in combo:
                row = t.table[truth.value]
                z = max(t.outcomes, key=lambda o: row.get(o, 0.0))
                b = sch.posterior(b, t.model, z)
            if b.prob_of(truth) >= target:
                return n
    return None


class SimContext(ToolContext):
    @property
    def truth(self) -> int:
        return int(self.meta["sim_truth"])


def _make_sim_executor(tool: SimTool) -> Callable:
    model = tool.model

    def run(ctx: SimContext, params: dict) -> ToolOutput:
        rng = np.random.default_rng([int(ctx.meta.get("seed", 0)) & 0xFFFFFFFF, int(ctx.item_id)])
        row = tool.table[ctx.truth]
        probs = np.array([row.get(z, 0.0) for z in tool.outcomes], dtype=np.float64)
        z = tool.outcomes[int(rng.choice(len(tool.outcomes), p=probs / probs.sum()))]
        z = z.item() if hasattr(z, "item") else z
        return ToolOutput(
            f"{tool.name} observed {z}",
            [Artifact.inline("reading", {"target": tool.name, "value": z, "source": tool.name})],
            {"observed": z},
            [Observation(model, z)],
        )

    return run


def sim_registry(tools: Sequence[SimTool]) -> Registry:
    reg = Registry(lambda image, meta: SimContext(image, meta))
    for t in tools:
        reg.register(t.spec(), _make_sim_executor(t))
    return reg.freeze()


_SIM_IMAGE = ChartImage(np.full((1, 1, 3), 255, dtype=np.uint8))
_SIM_QUESTION = parse_question("Which label is it?")


def run_sim_episode(env: SimEnvironment, config: sch.SchedulerConfig, truth: int, seed: int, planner=None):
    """One simulated episode; the answer is the belief's best label."""
    return run_episode(
        _SIM_IMAGE,
        _SIM_QUESTION,
        config,
        planner,
        sim_registry(env.tools),
        seed=seed,
        meta={"sim_truth": int(truth)},
        prior=env.prior,
        experts=[gt.BeliefExpert()],
        remedial_budget=0,
    )


@dataclass(frozen=True)
class SweepResult:
    param: str
    value: float
    accuracy: float
    mean_tool_calls: float
    episodes: int

    def __post_init__(self) -> None:
        if self.mean_tool_calls < 0 or not (0.0 <= self.accuracy <= 1.0):
            raise ValueError("accuracy must lie in [0, 1] and mean calls be nonnegative")

    def to_dict(self) -> dict:
        return {"param": self.param, "value": self.value, "accuracy": self.accuracy, "mean_calls": self.mean_tool_calls, "episodes": self.episodes}


SWEEP_COLUMNS = ("param", "value", "accuracy", "mean_calls", "episodes")
_PARAM_ATTR = {"lambda": "lam", "lam": "lam", "budget": "budget", "eta": "eta", "gain_decay": "gain_decay", "max_rounds": "max_rounds"}


def sweep_csv(results: Sequence[SweepResult]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in results:
        w.writerow(r.to_dict())
    return buf.getvalue()


def sweep_json(results: Sequence[SweepResult]) -> str:
    return json.dumps([r.to_dict() for r in results], sort_keys=True, separators=(",", ":"))


def _config_at(base: sch.SchedulerConfig, param: str, value: float) -> sch.SchedulerConfig:
    if param not in _PARAM_ATTR:
        raise ValueError(f"cannot sweep {param!r}")
    attr = _PARAM_ATTR[param]
    return replace(base, **{attr: int(value) if attr == "max_rounds" else float(value)})


def _pmap(fn: Callable, jobs: Sequence, workers: int) -> list:
    if workers <= 1 or len(jobs) < 2:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def _sim_job(job) -> tuple[bool, int]:
    env, config, truth, seed = job
    res = run_sim_episode(env, config, truth, seed)
    return res.answer == truth, res.calls


def sample_truths(prior: sch.Belief, episodes: int, seed: int) -> list[int]:
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0x5157])
    idx = rng.choice(len(prior.candidates), size=episodes, p=np.asarray(prior.probs) / sum(prior.probs))
    return [prior.candidates[int(i)].value for i in idx]


def run_sim_sweep(
    tools: Sequence[SimTool],
    prior: sch.Belief,
    grid: Sequence[float],
    episodes: int,
    seed: int = 0,
    param: str = "lambda",
    base: sch.SchedulerConfig | None = None,
    jobs: int = 1,
) -> list[SweepResult]:
    """Accuracy and mean calls per grid point; truths are shared across points."""
    if not grid:
        raise ValueError("sweep grid is empty")
    base = base or sch.SchedulerConfig()
    env = SimEnvironment(list(tools), prior)
    truths = sample_truths(prior, episodes, seed)
    out = []
    for v in grid:
        cfg = _config_at(base, param, v)
        work = [(env, cfg, t, seed * 1_000_003 + e) for e, t in enumerate(truths)]
        rows = _pmap(_sim_job, work, jobs)
        acc = sum(ok for ok, _ in rows) / len(rows) if rows else 0.0
        calls = sum(c for _, c in rows) / len(rows) if rows else 0.0
        out.append(SweepResult(param, float(v), acc, calls, len(rows)))
    return out


# ---------------------------------------------------------------- corpus evaluation


@dataclass
class CorpusItem:
    image: ChartImage
    spec: synthgen.ChartSpec
    truth: synthgen.GroundTruth
    name: str = ""


@dataclass
class PipelineConfig:
    scheduler: sch.SchedulerConfig = field(default_factory=sch.SchedulerConfig)
    ocr: dict = field(default_factory=lambda: {"backend": "template"})
    exclude: tuple[str, ...] = ()
    seed: int = 0
    temperature: float = gt.DEFAULT_TEMPERATURE
    margin: float = gt.DEFAULT_MARGIN


def load_corpus(directory: str | Path) -> list[CorpusItem]:
    try:
        manifest = synthgen.read_manifest(directory)
    except (OSError, ValueError, KeyError) as exc:
        raise EmptyCorpus(f"no readable corpus at {directory}: {exc}") from exc
    items = []
    for row in manifest.rows:
        image, spec, truth = synthgen.load_corpus_item(directory, row)
        items.append(CorpusItem(image, spec, truth, row["image"]))
    if not items:
        raise EmptyCorpus(f"corpus at {directory} is empty")
    return items


def render_corpus(specs: Sequence[synthgen.ChartSpec]) -> list[CorpusItem]:
    out = []
    for i, s in enumerate(specs):
        img, truth = synthgen.render(s)
        out.append(CorpusItem(img, s, truth, f"chart_{i:04d}"))
    return out


def nqa_question(truth: synthgen.GroundTruth, index: int) -> tuple[str, float]:
    """A NumberQA question about one cell, picked deterministically by index."""
    rows = truth.data_table
    cat, ser, val = rows[(index * 7 + 3) % len(rows)]
    return f"What is the {ser} of {cat}?", float(val)


def compare_question(truth: synthgen.GroundTruth, index: int) -> tuple[str, str]:
    rows = truth.data_table
    ser = rows[index % len(rows)][1]
    cells = [(c, v) for c, s, v in rows if s == ser]
    (a, va), (b, vb) = cells[index % len(cells)], cells[(index + 1) % len(cells)]
    order = "equal" if va == vb else ("greater" if va > vb else "less")
    multi = len({s for _, s, _ in rows}) > 1
    suffix = f" in {ser}" if multi else ""
    return f"Is {a} greater than {b}{suffix}?", order


def _answer_episode(item: CorpusItem, question: str, pipe: PipelineConfig):
    from chartlens.tools import default_registry

    return run_episode(
        item.image,
        parse_question(question),
        pipe.scheduler,
        None,
        default_registry(pipe.exclude),
        seed=pipe.seed,
        meta={"ocr": pipe.ocr},
        temperature=pipe.temperature,
        margin_threshold=pipe.margin,
    )


def _nqa_job(job) -> tuple[bool, int, Any]:
    item, index, pipe = job
    q, truth = nqa_question(item.truth, index)
    res = _answer_episode(item, q, pipe)
    return relaxed_accuracy(res.answer, truth), res.calls, res.answer


def evaluate_nqa(items: Sequence[CorpusItem], pipe: PipelineConfig | None = None, jobs: int = 1) -> tuple[float, float, list]:
    """Relaxed accuracy and mean tool calls of the agent on one question per chart."""
    if not items:
        raise EmptyCorpus("nothing to evaluate")
    pipe = pipe or PipelineConfig()
    rows = _pmap(_nqa_job, [(it, i, pipe) for i, it in enumerate(items)], jobs)
    return sum(r[0] for r in rows) / len(rows), sum(r[1] for r in rows) / len(rows), rows


def _table_job(job) -> float:
    item, pipe = job
    res = _answer_episode(item, "Convert the chart to a table", pipe)
    if not isinstance(res.answer, dict):
        return 0.0
    return rms_f1(DataTable.from_dict(res.answer), item.truth.data_table)


def evaluate_tables(items: Sequence[CorpusItem], pipe: PipelineConfig | None = None, jobs: int = 1) -> tuple[float, list[float]]:
    if not items:
        raise EmptyCorpus("nothing to evaluate")
    pipe = pipe or PipelineConfig()
    scores = _pmap(_table_job, [(it, pipe) for it in items], jobs)
    return float(np.mean(scores)), scores


def ocr_only_answer(item: CorpusItem, question: str, ocr: dict | None = None) -> float | None:
    """Answer from printed value labels alone.

    Numbers printed above the category label and within its slot are taken
    left to right; the legend's text order picks which one belongs to the
    asked series. Nothing is measured from the marks themselves.
    """
    from chartlens import perception
    from chartlens.font import normalize_text
    from chartlens.tools import make_backend

    q = parse_question(question)
    if not q.referents:
        return None
    texts = perception.read_text(item.image, make_backend({"ocr": ocr or {"backend": "template"}}))
    ref = normalize_text(q.referents[0])
    anchor = next((t for t in texts if normalize_text(t.string) == ref), None)
    if anchor is None:
        return None
    ax = (anchor.box[0] + anchor.box[2]) / 2.0
    # the slot is half the distance to the nearest label on the same baseline
    peers = [(t.box[0] + t.box[2]) / 2.0 for t in texts if t is not anchor and abs(t.box[1] - anchor.box[1]) <= 3]
    half = min((abs(c - ax) for c in peers), default=24.0) / 2.0
    labels = []
    for t in texts:
        v = perception.parse_number(t.string)
        cx = (t.box[0] + t.box[2]) / 2.0
        if v is not None and t.box[3] < anchor.box[1] and abs(cx - ax) <= half:
            labels.append((cx, v))
    if not labels:
        return None
    labels.sort()
    slot = 0
    if q.measure and len(labels) > 1:
        try:
            ke = perception.detect_key_elements(item.image)
        except perception.NoAxesFound:
            ke = None
        names = []
        for e in ke.legend_entries if ke else []:
            hit = next((t for t in texts if e.label_box and _boxes_overlap(t.box, e.label_box)), None)
            names.append(normalize_text(hit.string) if hit else None)
        if normalize_text(q.measure) in names:
            slot = names.index(normalize_text(q.measure))
    return labels[slot][1] if slot < len(labels) else None


def _boxes_overlap(a, b) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def evaluate_ocr_only(items: Sequence[CorpusItem], ocr: dict | None = None) -> float:
    hits = 0
    for i, it in enumerate(items):
        q, truth = nqa_question(it.truth, i)
        hits += relaxed_accuracy(ocr_only_answer(it, q, ocr), truth)
    return hits / len(items) if items else 0.0


def check_paired(annotated: Sequence[CorpusItem], deannotated: Sequence[CorpusItem]) -> None:
    if len(annotated) != len(deannotated):
        raise UnpairedCorpora(f"corpus sizes differ: {len(annotated)} vs {len(deannotated)}")
    for a, d in zip(annotated, deannotated):
        if a.truth.data_table != d.truth.data_table or a.spec.chart_type != d.spec.chart_type:
            raise UnpairedCorpora(f"{a.name} and {d.name} do not share data")


def run_deannotation_study(
    annotated: Sequence[CorpusItem],
    deannotated: Sequence[CorpusItem],
    pipe: PipelineConfig | None = None,
    jobs: int = 1,
) -> tuple[float, float, float]:
    """Relaxed accuracy on both corpora and the drop in percentage points."""
    check_paired(annotated, deannotated)
    acc_a, _, _ = evaluate_nqa(annotated, pipe, jobs)
    if annotated is deannotated:
        return acc_a, acc_a, 0.0
    acc_d, _, _ = evaluate_nqa(deannotated, pipe, jobs)
    return acc_a, acc_d, 100.0 * (acc_a - acc_d)


def run_corpus_sweep(
    items: Sequence[CorpusItem],
    grid: Sequence[float],
    param: str = "lambda",
    pipe: PipelineConfig | None = None,
    jobs: int = 1,
) -> list[SweepResult]:
    if not grid:
        raise ValueError("sweep grid is empty")
    if not items:
        raise EmptyCorpus("nothing to evaluate")
    pipe = pipe or PipelineConfig()
    out = []
    for v in grid:
        p = replace(pipe, scheduler=_config_at(pipe.scheduler, param, v))
        acc, calls, _ = evaluate_nqa(items, p, jobs)
        out.append(SweepResult(param, float(v), acc, calls, len(items)))
    return out
