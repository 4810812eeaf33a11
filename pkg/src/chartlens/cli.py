"""Command-line entry point: answer, synth, bench, replay and score.

Exit codes: 0 complete, 2 answered through the incomplete fallback, 1 error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from chartlens import bench, synthgen
from chartlens import evidence as ev
from chartlens import scheduler as sch
from chartlens.evidence import canonical
from chartlens.grouptalk import DEFAULT_MARGIN, DEFAULT_TEMPERATURE
from chartlens.image import ImageFormatError, read_image
from chartlens.qtypes import parse_question
from chartlens.reasoning import DataTable

SEED_ENV = "CHARTAGENT_SEED"
EXIT_OK, EXIT_ERROR, EXIT_INCOMPLETE = 0, 1, 2


class CliError(Exception):
    pass


def _emit(obj: Any) -> None:
    sys.stdout.write(json.dumps(canonical(obj), sort_keys=True, separators=(",", ":"), ensure_ascii=False) + "\n")


def resolve_seed(flag: int | None) -> int:
    if flag is not None:
        return flag
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw.strip() == "":
        return 0
    try:
        return int(raw)
    except ValueError as exc:
        raise CliError(f"{SEED_ENV} must be an integer, got {raw!r}") from exc


def _scheduler_config(args) -> sch.SchedulerConfig:
    base = sch.SchedulerConfig.from_file(args.config) if getattr(args, "config", None) else sch.SchedulerConfig()
    over = {}
    for flag, key in (("lam", "lambda"), ("budget", "budget"), ("eta", "eta"), ("gain_decay", "gain_decay"), ("max_rounds", "max_rounds")):
        v = getattr(args, flag, None)
        if v is not None:
            over[key] = v
    return sch.SchedulerConfig.from_mapping(over, base) if over else base


def _add_sched_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lambda", dest="lam", type=float, help="cost weight (default 0.2)")
    p.add_argument("--budget", type=float, help="cumulative cost cap (default 8)")
    p.add_argument("--eta", type=float, help="minimum worthwhile net gain (default 0.05)")
    p.add_argument("--gain-decay", dest="gain_decay", type=float, help="per-repeat decay of heuristic gain (default 0.25)")
    p.add_argument("--max-rounds", dest="max_rounds", type=int, help="round cap (default 16)")
    p.add_argument("--config", help="JSON or key=value file with scheduler settings")
    p.add_argument("--seed", type=int, help=f"seed; falls back to ${SEED_ENV}, then 0")


def _ocr_meta(args) -> dict:
    if args.ocr == "stub":
        if not args.ocr_sidecar:
            raise CliError("--ocr stub needs --ocr-sidecar (a corpus truth JSON)")
        if not Path(args.ocr_sidecar).is_file():
            raise CliError(f"OCR sidecar {args.ocr_sidecar} not found")
        return {"backend": "stub", "sidecar": str(args.ocr_sidecar), "p_drop": args.ocr_p_drop, "sigma_px": args.ocr_sigma}
    return {"backend": "template"}


# ---------------------------------------------------------------- answer


def cmd_answer(args) -> int:
    from chartlens.orchestrator import run_episode
    from chartlens.tools import default_registry

    config = _scheduler_config(args)
    seed = resolve_seed(args.seed)
    image = read_image(args.image)
    question = parse_question(args.question)
    res = run_episode(
        image,
        question,
        config,
        None,
        default_registry(),
        seed=seed,
        meta={"ocr": _ocr_meta(args)},
        temperature=args.temperature,
        margin_threshold=args.margin,
    )
    out_dir = Path(args.evidence_dir)
    ev.save(res.package, out_dir)
    _emit(
        {
            "answer": res.answer,
            "confidence": res.confidence,
            "calls": res.calls,
            "cost": res.cost,
            "incomplete": res.incomplete,
            "evidence_path": str(out_dir),
        }
    )
    return EXIT_INCOMPLETE if res.incomplete else EXIT_OK


# ---------------------------------------------------------------- synth


def _corpus_specs(args, seed: int) -> list[synthgen.ChartSpec]:
    if args.spec:
        data = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        rows = data if isinstance(data, list) else [data]
        return [synthgen.ChartSpec.from_dict(r) for r in rows]
    if args.n is None or args.n < 0:
        raise CliError("--n must be a nonnegative count")
    types = synthgen.CHART_TYPES if args.type == "all" else (args.type,)
    if any(t not in synthgen.CHART_TYPES for t in types):
        raise CliError(f"unknown chart type {args.type!r}")
    constraints = json.loads(args.constraints) if args.constraints else None
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=args.n)
    return [synthgen.generate_spec(types[i % len(types)], int(s), constraints) for i, s in enumerate(seeds)]


def cmd_synth(args) -> int:
    seed = resolve_seed(args.seed)
    try:
        specs = _corpus_specs(args, seed)
    except (synthgen.InvalidSpec, synthgen.UnsupportedChartType, synthgen.CanvasTooSmall, ValueError, KeyError, TypeError) as exc:
        raise CliError(f"invalid corpus parameters: {exc}") from exc
    out = Path(args.out)
    manifest = synthgen.write_corpus(specs, out)
    report = {"manifest": str(out / "manifest.json"), "count": len(manifest.rows)}
    if args.deannotate:
        paired = synthgen.write_corpus([synthgen.deannotate(s) for s in specs], out / "deannotated")
        report["deannotated_manifest"] = str(out / "deannotated" / "manifest.json")
        report["deannotated_count"] = len(paired.rows)
    _emit(report)
    return EXIT_OK


# ---------------------------------------------------------------- bench


def parse_sweep(text: str) -> tuple[str, list[float]]:
    if "=" not in text:
        raise CliError(f"sweep must look like lambda=0,0.2 or budget=3,8; got {text!r}")
    name, _, vals = text.partition("=")
    name = name.strip().lower()
    if name not in ("lambda", "budget", "eta", "gain_decay", "max_rounds"):
        raise CliError(f"cannot sweep {name!r}")
    try:
        grid = [float(v) for v in vals.split(",") if v.strip()]
    except ValueError as exc:
        raise CliError(f"malformed sweep values {vals!r}") from exc
    if not grid:
        raise CliError("sweep grid is empty")
    return name, grid


def cmd_bench(args) -> int:
    seed = resolve_seed(args.seed)
    base = _scheduler_config(args)
    sweep = parse_sweep(args.sweep) if args.sweep else None
    report: dict[str, Any] = {}
    if args.sim:
        env = bench.hard_environment()
        name, grid = sweep or ("lambda", [base.lam])
        results = bench.run_sim_sweep(env.tools, env.prior, grid, args.episodes, seed, name, base, args.jobs)
    else:
        if not args.corpus:
            raise CliError("bench needs a corpus directory or --sim")
        items = bench.load_corpus(args.corpus)
        pipe = bench.PipelineConfig(base, {"backend": "template"}, (), seed)
        if args.deannotated:
            paired = bench.load_corpus(args.deannotated)
            acc_a, acc_d, drop = bench.run_deannotation_study(items, paired, pipe, args.jobs)
            report["deannotation"] = {"acc_annotated": acc_a, "acc_deannotated": acc_d, "drop_pp": drop}
            report["ocr_only_deannotated"] = bench.evaluate_ocr_only(paired)
        if args.task == "table":
            mean, _ = bench.evaluate_tables(items, pipe, args.jobs)
            report["rms_f1"] = mean
        name, grid = sweep or ("lambda", [base.lam])
        results = bench.run_corpus_sweep(items, grid, name, pipe, args.jobs)
    if args.csv:
        Path(args.csv).write_text(bench.sweep_csv(results), encoding="utf-8")
    if args.json:
        Path(args.json).write_text(bench.sweep_json(results), encoding="utf-8")
    report["results"] = [r.to_dict() for r in results]
    _emit(report)
    return EXIT_OK


# ---------------------------------------------------------------- replay


def cmd_replay(args) -> int:
    from chartlens.tools import default_registry

    image = read_image(args.image)
    try:
        pkg = ev.load(args.evidence)
    except ev.ChainBroken as exc:
        _emit({"all_match": False, "chain_ok": False, "error": str(exc)})
        print(f"chain broken: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except ev.SchemaViolation as exc:
        _emit({"all_match": False, "chain_ok": False, "error": str(exc)})
        print(f"evidence rejected: {exc}", file=sys.stderr)
        return EXIT_ERROR
    registry = default_registry()
    try:
        report = ev.replay_verify(pkg, image, registry)
    except ev.ImageMismatch as exc:
        _emit({"all_match": False, "error": str(exc)})
        print(str(exc), file=sys.stderr)
        return EXIT_ERROR
    _emit(report.to_dict())
    if not report.all_match:
        print(f"mismatched items: {report.mismatched}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


# ---------------------------------------------------------------- score


def _load_json(path: str) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read {path}: {exc}") from exc


def _as_number(x: Any) -> Any:
    if isinstance(x, dict):
        if "answer" in x:
            return x["answer"]
        if "value" in x:
            return x["value"]
        raise CliError("numeric record needs an 'answer' or 'value' field")
    return x


def _as_table(x: Any) -> list:
    if isinstance(x, dict):
        if "ground_truth" in x:
            return [tuple(r) for r in x["ground_truth"]["data_table"]]
        if "data_table" in x:
            return [tuple(r) for r in x["data_table"]]
        if "answer" in x and isinstance(x["answer"], dict):
            x = x["answer"]
        if "row_keys" in x:
            return DataTable.from_dict(x).triples()
        raise CliError("table record must be a table, a truth file or triples")
    if isinstance(x, list) and all(isinstance(r, (list, tuple)) and len(r) == 3 for r in x):
        return [tuple(r) for r in x]
    raise CliError("table record must be a table, a truth file or triples")


def _is_batch_of_tables(x: Any) -> bool:
    return isinstance(x, list) and bool(x) and all(isinstance(e, dict) or (isinstance(e, list) and e and isinstance(e[0], list)) for e in x)


def cmd_score(args) -> int:
    pred, truth = _load_json(args.pred), _load_json(args.truth)
    if args.metric == "relaxed":
        ps = pred if isinstance(pred, list) else [pred]
        ts = truth if isinstance(truth, list) else [truth]
        if len(ps) != len(ts):
            raise CliError(f"{len(ps)} predictions for {len(ts)} truths")
        vals = []
        for p, t in zip(ps, ts):
            tv = _as_number(t)
            if isinstance(tv, bool) or not isinstance(tv, (int, float)):
                raise CliError("truth values must be numbers")
            vals.append(1.0 if bench.relaxed_accuracy(_as_number(p), tv, args.tolerance) else 0.0)
    else:
        if _is_batch_of_tables(pred) != _is_batch_of_tables(truth):
            raise CliError("prediction and truth must both be single tables or both batches")
        ps = pred if _is_batch_of_tables(pred) else [pred]
        ts = truth if _is_batch_of_tables(truth) else [truth]
        if len(ps) != len(ts):
            raise CliError(f"{len(ps)} predicted tables for {len(ts)} truths")
        vals = [bench.rms_f1(_as_table(p), _as_table(t)) for p, t in zip(ps, ts)]
    score = float(np.mean(vals)) if vals else 0.0
    _emit({"metric": args.metric, "score": score, "count": len(vals)})
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chartlens", description="Tool-based chart reading with an auditable evidence trail.")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("answer", help="answer a question about a chart image")
    a.add_argument("--image", required=True, help="PPM or PNG chart")
    a.add_argument("--question", required=True)
    a.add_argument("--evidence-dir", dest="evidence_dir", default="evidence", help="where the evidence package is written")
    a.add_argument("--ocr", choices=("template", "stub"), default="template")
    a.add_argument("--ocr-sidecar", dest="ocr_sidecar", help="truth JSON feeding the stub OCR")
    a.add_argument("--ocr-p-drop", dest="ocr_p_drop", type=float, default=0.0)
    a.add_argument("--ocr-sigma", dest="ocr_sigma", type=float, default=0.0)
    a.add_argument("--temperature", type=float, default=DEFAULT_TEMPERATURE)
    a.add_argument("--margin", type=float, default=DEFAULT_MARGIN, help="arbitration margin threshold")
    _add_sched_flags(a)
    a.set_defaults(func=cmd_answer)

    s = sub.add_parser("synth", help="render a synthetic corpus with ground truth")
    s.add_argument("--out", required=True)
    s.add_argument("--type", default="all", help="bar, line, pie, donut, scatter or all")
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--spec", help="JSON chart spec (or list of specs) to render instead of sampling")
    s.add_argument("--constraints", help="JSON object of generator constraints")
    s.add_argument("--deannotate", action="store_true", help="also write the paired corpus without value labels")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    b = sub.add_parser("bench", help="run lambda or budget sweeps on a corpus or the simulated environment")
    b.add_argument("corpus", nargs="?", help="corpus directory written by synth")
    b.add_argument("--sim", action="store_true", help="use the simulated tool environment")
    b.add_argument("--sweep", help="lambda=0,0.2,0.5,1.0 or budget=3,8")
    b.add_argument("--episodes", type=int, default=200, help="episodes per grid point (--sim)")
    b.add_argument("--deannotated", help="paired de-annotated corpus for the annotation study")
    b.add_argument("--task", choices=("nqa", "table"), default="nqa")
    b.add_argument("--csv", help="write sweep rows as CSV")
    b.add_argument("--json", help="write sweep rows as JSON")
    b.add_argument("--jobs", type=int, default=1, help="parallel episode workers")
    _add_sched_flags(b)
    b.set_defaults(func=cmd_bench)

    r = sub.add_parser("replay", help="re-run an evidence package and compare every step")
    r.add_argument("--evidence", required=True, help="evidence directory or package.json")
    r.add_argument("--image", required=True)
    r.set_defaults(func=cmd_replay)

    c = sub.add_parser("score", help="score predictions against truth")
    c.add_argument("--metric", choices=("relaxed", "rmsf1"), required=True)
    c.add_argument("--pred", required=True)
    c.add_argument("--truth", required=True)
    c.add_argument("--tolerance", type=float, default=bench.RELAXED_TOL)
    c.set_defaults(func=cmd_score)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors itself
        return EXIT_ERROR if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (CliError, sch.InvalidConfig, ImageFormatError, bench.EmptyCorpus, bench.UnpairedCorpora, synthgen.IoFailure, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
