"""The eleven library tools, wired to the orchestrator's registry.

Every executor reads and extends a per-episode workspace. It returns a
summary, archived artifacts and any observations the belief should absorb.
Executors are deterministic given the image, the episode metadata and the
order of calls, which is what makes replay possible.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from chartlens import perception, raster, reasoning
from chartlens import scheduler as sch
from chartlens.evidence import Artifact
from chartlens.font import normalize_text
from chartlens.image import ChartImage, encode_pbm
from chartlens.ocr import GroundTruthOcr, TemplateOcr, TextItem
from chartlens.orchestrator import Observation, ParamField, Registry, ToolContext, ToolOutput, ToolSpec
from chartlens.qtypes import CHART_TO_TABLE, NUMBER_QA, ORDERINGS, TASKS, VALUE_COMPARE, AnswerCandidate, Question

CARTESIAN = frozenset({"bar", "line", "scatter"})
CIRCULAR = frozenset({"pie", "donut"})
ALL_TYPES = CARTESIAN | CIRCULAR
ALL_TASKS = frozenset(TASKS)

AUX_SIGMA_REL = 0.02
LABEL_SIGMA_REL = 0.005
SHARE_SIGMA_ABS = 1.0  # percentage points
COMPARE_FLIP = 0.05
GRAPH_FLIP = 0.1
AUX_CONFIDENCE = 0.9
LABEL_CONFIDENCE = 0.95
SHARE_COLUMN = "SHARE"  # circular charts carry one value column


class MissingInput(RuntimeError):
    pass


class UnresolvedReferent(LookupError):
    pass


# ---------------------------------------------------------------- context


def make_backend(meta: dict):
    cfg = meta.get("ocr") or {"backend": "template"}
    kind = cfg.get("backend", "template")
    if kind == "template":
        return TemplateOcr()
    if kind == "stub":
        return GroundTruthOcr(
            sidecar=cfg.get("sidecar"),
            p_drop=float(cfg.get("p_drop", 0.0)),
            sigma_px=float(cfg.get("sigma_px", 0.0)),
            seed=int(cfg.get("seed", meta.get("seed", 0))),
        )
    raise ValueError(f"unknown OCR backend {kind!r}")


@dataclass
class LibraryContext(ToolContext):
    ocr: Any = None
    _question: Question | None = field(default=None, repr=False)

    @property
    def question(self) -> Question:
        if self._question is None:
            q = self.meta.get("question")
            self._question = Question.from_dict(q) if q else Question("", NUMBER_QA, (), None, True)
        return self._question

    @property
    def seed(self) -> int:
        return int(self.meta.get("seed", 0))


def make_context(image: ChartImage, meta: dict) -> LibraryContext:
    return LibraryContext(image, meta, ocr=make_backend(meta))


# ---------------------------------------------------------------- helpers


def _png(image: ChartImage) -> bytes:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(image.pixels, mode="RGB").save(buf, format="PNG", compress_level=6)
    return buf.getvalue()


def _ws(ctx) -> dict:
    return ctx.workspace


def _need(ctx, key: str):
    v = ctx.workspace.get(key)
    if v is None:
        raise MissingInput(f"{key} not available yet")
    return v


def _edit_distance(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def _resolve(name: str | None, labels: list[str | None]) -> int | None:
    """Index of the label matching ``name`` exactly, else within one edit."""
    if not name:
        return None
    key = normalize_text(name.strip())
    for i, lab in enumerate(labels):
        if lab is not None and lab == key:
            return i
    close = [(i, _edit_distance(key, lab)) for i, lab in enumerate(labels) if lab is not None]
    close = [(i, d) for i, d in close if d <= 1]
    if len(close) == 1:
        return close[0][0]
    return None


def _overlap(a, b) -> int:
    w = min(a[2], b[2]) - max(a[0], b[0]) + 1
    h = min(a[3], b[3]) - max(a[1], b[1]) + 1
    return max(w, 0) * max(h, 0)


def _label_for_box(texts: list[TextItem], box) -> str | None:
    if box is None:
        return None
    best = max(texts, key=lambda t: (_overlap(t.box, box), -t.box[0]), default=None)
    if best is None or _overlap(best.box, box) == 0:
        return None
    return normalize_text(best.string)


def _categories(ctx) -> list[dict]:
    """Category anchors (x ticks) with their OCR labels, left to right."""
    ws = _ws(ctx)
    if "categories" in ws:
        return ws["categories"]
    ke = _need(ctx, "elements")
    texts = ws.get("texts") or []
    xrow = ke.plot_area[3]
    cats = []
    for i, t in enumerate(ke.ticks_on("x")):
        best = None
        for it in texts:
            l, top, r, b = it.box
            if not (xrow < top <= xrow + 20):
                continue
            d = abs((l + r) / 2.0 - t.pixel)
            if d <= max(6.0, (r - l) / 2.0) and (best is None or d < best[0]):
                best = (d, it)
        label = normalize_text(best[1].string) if best else None
        cats.append({"index": i, "pixel": float(t.pixel), "label": label})
    if "texts" in ws:  # labels are only final once OCR has run
        ws["categories"] = cats
    return cats


def _cat_key(cat: dict) -> str:
    return cat["label"] or f"c{cat['index']}"


def _series_key(series: list[dict], j: int) -> str:
    return series[j]["label"] or f"s{j}"


def _dominant_colors(image: ChartImage, plot_area, min_count: int = 20, min_dist: float = 40.0) -> list[tuple[int, int, int]]:
    x0, top, x1, y0 = plot_area
    crop = ChartImage(np.ascontiguousarray(image.pixels[top:y0, x0 + 1 : x1 + 1]))
    mask = perception.color_mask(crop)
    if not mask.any():
        return []
    uniq, _, counts = raster.unique_colors(crop.pixels[mask])
    picked: list[np.ndarray] = []
    for i in np.argsort(-counts, kind="stable"):
        if counts[i] < min_count or len(picked) >= 8:
            break
        c = uniq[i].astype(np.float64)
        if all(np.linalg.norm(c - p) > min_dist for p in picked):
            picked.append(c)
    return [tuple(int(v) for v in p) for p in picked]


def _question_series(ctx) -> int | None:
    series = _ws(ctx).get("series") or []
    if not series:
        return None
    q = ctx.question
    j = _resolve(q.measure, [s["label"] for s in series]) if q.measure else None
    if j is not None:
        return j
    return 0


def _question_targets(ctx) -> list[str]:
    """Reading keys the question asks about (category|series)."""
    q = ctx.question
    ws = _ws(ctx)
    ct = ws.get("chart_type")
    if q.task == CHART_TO_TABLE:
        return []
    if ct in CIRCULAR:
        labels = ws.get("sector_label_list")
        if labels is None:
            return []
        idx = [_resolve(r, labels) for r in q.referents]
        return [f"{labels[i]}|{SHARE_COLUMN}" for i in idx if i is not None]
    if "categories" not in ws and ws.get("elements") is None:
        return []
    cats = _categories(ctx)
    j = _question_series(ctx)
    if j is None:
        return []
    series = ws["series"]
    out = []
    for r in q.referents:
        i = _resolve(r, [c["label"] for c in cats])
        if i is not None:
            out.append(f"{_cat_key(cats[i])}|{_series_key(series, j)}")
    return out


def _record(ctx, out: ToolOutput, target: str, value: float, source: str, confidence: float, model: sch.ObservationModel) -> None:
    ws = _ws(ctx)
    ws.setdefault("readings", {}).setdefault(target, []).append(
        {"value": float(value), "source": source, "confidence": confidence, "evidence_id": ctx.item_id}
    )
    out.artifacts.append(
        Artifact.inline(
            "reading",
            {
                "target": target,
                "value": float(value),
                "candidate": {"kind": "numeric", "value": float(value)},
                "source": source,
                "confidence": confidence,
            },
        )
    )
    if ctx.question.task == NUMBER_QA and target in _question_targets(ctx):
        out.observations.append(Observation(model, float(value)))


def _label_agrees(label: float, geometric: float, tick_step: float | None) -> bool:
    """A printed value must sit near what the geometry says, or it was misread."""
    slack = max(0.1 * abs(geometric), 0.5 * tick_step if tick_step else 0.0)
    return abs(label - geometric) <= slack


def best_reading(rows: list[dict]) -> dict:
    """A value label wins when it agrees with geometry within 10%; else geometry."""
    labels = [r for r in rows if r["source"] == "read_text"]
    geo = [r for r in rows if r["source"] != "read_text"]
    if labels and geo:
        g = geo[0]["value"]
        if abs(labels[0]["value"] - g) <= 0.1 * max(abs(g), 1e-9):
            return labels[0]
        return geo[0]
    return (labels or geo)[0]


_AUX_MODEL = sch.ObservationModel.gaussian("read_via_auxline", AUX_SIGMA_REL)
_LABEL_MODEL = sch.ObservationModel.gaussian("read_text", LABEL_SIGMA_REL)
_SHARE_MODEL = sch.ObservationModel.gaussian("segment_sectors", 0.0, SHARE_SIGMA_ABS)
_COMPARE_MODEL = sch.ObservationModel.flip("calc", ORDERINGS, COMPARE_FLIP)
_GRAPH_MODEL = sch.ObservationModel.flip("build_relation_graph", ORDERINGS, GRAPH_FLIP)
_TABLE_MODEL = sch.ObservationModel.discrete(
    "structure_table",
    {"table": {"complete": 0.95, "partial": 0.05}},
    ("complete", "partial"),
    residual_row={"complete": 0.05, "partial": 0.95},
)


def _numeric_texts_in_plot(ctx) -> list[tuple[TextItem, float]]:
    ws = _ws(ctx)
    ke = ws.get("elements")
    out = []
    for it in ws.get("texts") or []:
        v = perception.parse_number(it.string)
        if v is None:
            continue
        if ke is not None and ke.plot_area is not None:
            x0, top, x1, y0 = ke.plot_area
            l, t, r, b = it.box
            if l <= x0 or b >= y0 or r > x1 + 40:
                continue
        out.append((it, v))
    return out


def _value_label_near(ctx, x: float, y: float, kind: str) -> float | None:
    """Numeric annotation drawn just above a bar top or a curve point."""
    expect = y - 3 if kind == "bar" else y - 7
    best = None
    for it, v in _numeric_texts_in_plot(ctx):
        l, t, r, b = it.box
        if abs((l + r) / 2.0 - x) > 3.5:
            continue
        if not (expect - 5 <= b <= expect + 3):
            continue
        d = abs(b - expect)
        if best is None or d < best[0]:
            best = (d, v)
    return best[1] if best else None


# ---------------------------------------------------------------- executors


def t_classify_chart(ctx, params) -> ToolOutput:
    ct, conf = reasoning.classify_chart(ctx.image)
    ws = _ws(ctx)
    ws["chart_type"], ws["chart_conf"] = ct, conf
    return ToolOutput(
        f"chart_type={ct} confidence={conf:.2f}",
        [Artifact.inline("reading", {"chart_type": ct, "confidence": conf})],
        {"chart_type": ct, "confidence": conf},
    )


def t_detect_key_elements(ctx, params) -> ToolOutput:
    ws = _ws(ctx)
    ct = ws.get("chart_type")
    ke = None
    if ct not in CIRCULAR:
        try:
            ke = perception.detect_key_elements(ctx.image)
        except perception.NoAxesFound:
            if ct in CARTESIAN:
                raise
    if ke is None:
        legend = perception.detect_legend(ctx.image)
        shown = perception.KeyElements(None, None, None, legend_entries=legend)
        overlay = perception.draw_elements(ctx.image, shown)
        payload = shown.to_dict()
    else:
        legend = ke.legend_entries
        overlay = ke.overlay if ke.overlay is not None else perception.draw_elements(ctx.image, ke)
        payload = ke.to_dict()
    ws["elements"], ws["legend"] = ke, legend
    summary = ke.summary() if ke is not None else {"axes": False, "legend_entries": len(legend)}
    text = ", ".join(f"{k}={v}" for k, v in summary.items() if k != "plot_area")
    return ToolOutput(
        f"elements: {text}",
        [Artifact.inline("bbox_set", payload), Artifact.file("overlay_image_ref", _png(overlay), "png")],
        summary,
    )


def t_read_text(ctx, params) -> ToolOutput:
    items = perception.read_text(ctx.image, ctx.ocr)
    _ws(ctx)["texts"] = items
    numeric = sum(1 for it in items if perception.parse_number(it.string) is not None)
    return ToolOutput(
        f"{len(items)} text items, {numeric} numeric",
        [Artifact.inline("text_items", [it.to_dict() for it in items])],
        {"items": len(items), "numeric": numeric, "strings": [it.string for it in items[:12]]},
    )


def t_calibrate_axis(ctx, params) -> ToolOutput:
    ke = _need(ctx, "elements")
    texts = _need(ctx, "texts")
    axis = params.get("axis", "y")
    anchors = perception.tick_anchors(ke, texts, axis)
    cal = perception.calibrate_axis(anchors, axis)
    vals = sorted({v for _, v in anchors})
    diffs = [b - a for a, b in zip(vals, vals[1:]) if b - a > 0]
    step = float(np.median(diffs)) if diffs else None
    ws = _ws(ctx)
    ws["calibration"], ws["tick_step"] = cal, step
    payload = {**cal.to_dict(), "anchors": [list(a) for a in anchors], "tick_step": step}
    return ToolOutput(
        f"value = {cal.alpha:.6g}*pixel + {cal.beta:.6g} from {cal.anchor_count} anchors (rms {cal.residual_rms:.3g}), tick step {step}",
        [Artifact.inline("calibration", payload)],
        {"alpha": cal.alpha, "beta": cal.beta, "anchors": cal.anchor_count, "rms": cal.residual_rms, "tick_step": step},
    )


def _pie_label_readings(ctx, seg: perception.SectorSegmentation) -> dict[int, float]:
    """Percentage annotations placed outside the rim, keyed by sector index."""
    cx, cy = seg.center
    cents = np.array([e.cluster.centroid for e in seg.estimates], dtype=np.float64)
    out: dict[int, float] = {}
    for it in _ws(ctx).get("texts") or []:
        s = it.string.strip()
        if not s.endswith("%"):
            continue
        v = perception.parse_number(s[:-1])
        if v is None:
            continue
        tx, ty = it.center()
        dist = math.hypot(tx - cx, ty - cy)
        if not (seg.r_outer + 2 <= dist <= seg.r_outer + 32):
            continue
        ang = math.atan2(ty - cy, tx - cx)
        r = seg.r_outer - 4
        px = int(round(cx + r * math.cos(ang)))
        py = int(round(cy + r * math.sin(ang)))
        if not (0 <= px < ctx.image.width and 0 <= py < ctx.image.height):
            continue
        color = ctx.image.pixels[py, px].astype(np.float64)
        k = int(np.argmin(np.linalg.norm(cents - color, axis=1)))
        out.setdefault(k, v)
    return out


def t_match_colors_to_legend(ctx, params) -> ToolOutput:
    ws = _ws(ctx)
    ct = ws.get("chart_type")
    legend = ws.get("legend") or []
    texts = ws.get("texts") or []
    labels = [_label_for_box(texts, e.label_box) for e in legend]
    out = ToolOutput("", [], {})
    if ct in CIRCULAR:
        seg = _need(ctx, "segmentation")
        regions = [e.color for e in seg.estimates]
    else:
        ke = _need(ctx, "elements")
        if ct == "bar":
            regions = []
            for b in ke.bars:
                if b.color not in regions:
                    regions.append(b.color)
        else:
            regions = _dominant_colors(ctx.image, ke.plot_area)
    if not regions:
        raise perception.SeriesNotFound("no coloured data regions to match")
    flags = []
    if legend:
        lm = perception.match_colors_to_legend([(lab or f"#{i}", e.color) for i, (lab, e) in enumerate(zip(labels, legend))], regions)
        assigned = {}
        for i, e in enumerate(legend):
            key = labels[i] or f"#{i}"
            if key in lm.mapping:
                assigned[lm.mapping[key]] = labels[i]
        if lm.count_mismatch:
            flags.append("count_mismatch")
        dist = {k: round(v, 3) for k, v in lm.distances.items()}
    else:
        assigned = {}
        flags.append("no_legend")
        dist = {}
    if ct in CIRCULAR:
        seg = ws["segmentation"]
        names = [assigned.get(i) for i in range(len(regions))]
        ws["sector_names"] = names
        ws["sector_label_list"] = [n or f"c{i}" for i, n in enumerate(names)]
        label_vals = _pie_label_readings(ctx, seg)
        order = []
        for i, est in enumerate(seg.estimates):
            target = f"{ws['sector_label_list'][i]}|{SHARE_COLUMN}"
            if i in label_vals and _label_agrees(label_vals[i], 100.0 * est.proportion, 6.0):
                order.append((target, label_vals[i], "read_text", LABEL_CONFIDENCE, _LABEL_MODEL))
            order.append((target, 100.0 * est.proportion, "segment_sectors", AUX_CONFIDENCE, _SHARE_MODEL))
        for row in order:
            _record(ctx, out, *row)
        mapping = {ws["sector_label_list"][i]: i for i in range(len(regions))}
    else:
        # series follow legend order; unmatched regions keep positional names
        series = []
        by_region = sorted(assigned.items(), key=lambda kv: [labels.index(kv[1]) if kv[1] in labels else 99, kv[0]])
        used = set()
        for r, lab in by_region:
            series.append({"label": lab, "color": tuple(int(c) for c in regions[r])})
            used.add(r)
        for r, col in enumerate(regions):
            if r not in used:
                series.append({"label": None, "color": tuple(int(c) for c in col)})
        ws["series"] = series
        mapping = {(s["label"] or f"s{j}"): j for j, s in enumerate(series)}
    ws["legend_map"] = mapping
    out.summary = f"legend mapping {mapping}" + (f" flags={flags}" if flags else "")
    out.artifacts.insert(0, Artifact.inline("bbox_set", {"mapping": mapping, "distances": dist, "flags": flags}))
    out.state = {"mapping": mapping, "flags": flags}
    return out


def t_extract_curve_skeleton(ctx, params) -> ToolOutput:
    ws = _ws(ctx)
    ke = _need(ctx, "elements")
    series = _need(ctx, "series")
    ct = ws.get("chart_type")
    anchors = [c["pixel"] for c in _categories(ctx)]
    skels = {}
    union = np.zeros((ctx.image.height, ctx.image.width), dtype=bool)
    info = []
    for j, s in enumerate(series):
        if ct == "scatter":
            sk = perception.extract_markers(ctx.image, s["color"], ke.plot_area)
        else:
            sk = perception.extract_curve_skeleton(ctx.image, s["color"], ke.plot_area, anchors_x=anchors or None)
        skels[j] = sk
        if sk.mask is not None:
            union |= sk.mask
        lo, hi = sk.x_extent()
        info.append({"series": _series_key(series, j), "points": len(sk.points), "x_extent": [lo, hi], "kind": sk.kind})
    ws["skeletons"] = skels
    return ToolOutput(
        f"{len(skels)} series traced: " + ", ".join(f"{i['series']}({i['points']} pts)" for i in info),
        [Artifact.inline("reading", {"curves": info}), Artifact.file("mask_ref", encode_pbm(union), "pbm")],
        {"curves": info},
    )


def _bar_lookup(ctx) -> dict[tuple[int, int], int]:
    ws = _ws(ctx)
    if "bar_lookup" in ws:
        return ws["bar_lookup"]
    ke = _need(ctx, "elements")
    series = _need(ctx, "series")
    cats = _categories(ctx)
    cols = np.array([s["color"] for s in series], dtype=np.float64)
    lookup: dict[tuple[int, int], int] = {}
    for b_idx, b in enumerate(ke.bars):
        if not cats:
            break
        ci = min(range(len(cats)), key=lambda i: abs(cats[i]["pixel"] - b.center_x))
        sj = int(np.argmin(np.linalg.norm(cols - np.asarray(b.color, dtype=np.float64), axis=1)))
        lookup.setdefault((ci, sj), b_idx)
    ws["bar_lookup"] = lookup
    return lookup


def _target_cells(ctx, params) -> list[tuple[int, int]]:
    cats = _categories(ctx)
    series = _need(ctx, "series")
    want = params.get("targets") or ["*"]
    if "*" in want:
        ci = list(range(len(cats)))
    else:
        ci = []
        for name in want:
            i = _resolve(str(name), [c["label"] for c in cats])
            if i is None:
                raise UnresolvedReferent(f"no category named {name!r}")
            ci.append(i)
    s = params.get("series")
    if s in (None, "*"):
        sj = list(range(len(series))) if s == "*" or ctx.question.task == CHART_TO_TABLE else [_question_series(ctx) or 0]
    else:
        j = _resolve(str(s), [x["label"] for x in series])
        if j is None:
            raise UnresolvedReferent(f"no series named {s!r}")
        sj = [j]
    return [(i, j) for i in ci for j in sj]


def t_read_via_auxline(ctx, params) -> ToolOutput:
    ws = _ws(ctx)
    ct = ws.get("chart_type")
    cal = _need(ctx, "calibration")
    ke = _need(ctx, "elements")
    series = _need(ctx, "series")
    cats = _categories(ctx)
    step = ws.get("tick_step")
    cells = _target_cells(ctx, params)
    out = ToolOutput("", [], {})
    overlay = ctx.image
    done = ws.setdefault("read_done", set())
    parts = []
    for ci, sj in cells:
        target = f"{_cat_key(cats[ci])}|{_series_key(series, sj)}"
        try:
            if ct == "bar":
                b_idx = _bar_lookup(ctx).get((ci, sj))
                if b_idx is None:
                    raise perception.NoIntersection(f"no bar for {target}")
                rd = perception.read_via_auxline(ke, cal, int(b_idx), image=overlay, tick_step=step)
                lx, ly, kind = ke.bars[b_idx].center_x, rd.pixel, "bar"
            else:
                sk = _need(ctx, "skeletons")[sj]
                x = cats[ci]["pixel"]
                if sk.kind == "markers":
                    near = [p for p in sk.points if abs(p[0] - x) <= 4]
                    if not near:
                        raise perception.NoIntersection(f"no marker near x={x}")
                    x = min(near, key=lambda p: abs(p[0] - cats[ci]["pixel"]))[0]
                rd = perception.read_via_auxline(sk, cal, float(x), image=overlay, tick_step=step)
                lx, ly, kind = float(x), rd.pixel, "point"
        except perception.NoIntersection as exc:
            parts.append(f"{target}: {exc}")
            continue
        overlay = rd.overlay if rd.overlay is not None else overlay
        label = _value_label_near(ctx, lx, ly, kind)
        if label is not None and not _label_agrees(label, rd.value, step):
            parts.append(f"{target}: label {label:g} rejected against geometry {rd.value:.4g}")
            label = None
        if label is not None:
            _record(ctx, out, target, label, "read_text", LABEL_CONFIDENCE, _LABEL_MODEL)
        _record(ctx, out, target, rd.value, "read_via_auxline", AUX_CONFIDENCE, _AUX_MODEL)
        done.add(target)
        units = f" ({rd.tick_units:.2f} ticks)" if rd.tick_units is not None else ""
        parts.append(f"{target}={rd.value:.4g}{units}" + (f" label {label:g}" if label is not None else ""))
    if not any(a.kind == "reading" for a in out.artifacts):
        raise perception.NoIntersection("; ".join(parts) or "nothing to read")
    out.artifacts.append(Artifact.file("overlay_image_ref", _png(overlay), "png"))
    out.summary = "read " + "; ".join(parts[:6]) + (f"; ... {len(parts) - 6} more" if len(parts) > 6 else "")
    out.state = {"readings": parts[:8], "count": len(parts)}
    return out


def t_segment_sectors(ctx, params) -> ToolOutput:
    ws = _ws(ctx)
    ct = ws.get("chart_type")
    if ct not in CIRCULAR:
        ct = "donut" if params.get("annulus") else "pie"
    legend = ws.get("legend")
    seg = perception.segment_sectors_full(ctx.image, ct, ctx.seed, legend=legend or None)
    ws["segmentation"] = seg
    shares = [
        {"color": list(e.color), "proportion": e.proportion, "components": e.components, "angle": e.implied_angle}
        for e in seg.estimates
    ]
    return ToolOutput(
        f"{len(shares)} sectors (k from {seg.k_source}): " + ", ".join(f"{100 * s['proportion']:.1f}%" for s in shares),
        [
            Artifact.inline("reading", {"sectors": shares, "center": list(seg.center), "r_outer": seg.r_outer, "r_inner": seg.r_inner}),
            Artifact.file("mask_ref", encode_pbm(seg.mask), "pbm"),
        ],
        {"k": seg.k, "k_source": seg.k_source, "shares": [round(s["proportion"], 4) for s in shares]},
    )


def _compare_operands(ctx) -> tuple[str, str, float, float]:
    targets = _question_targets(ctx)
    if len(targets) < 2:
        raise UnresolvedReferent("comparison needs two resolved referents")
    readings = _ws(ctx).get("readings", {})
    a, b = targets[:2]
    if a not in readings or b not in readings:
        raise MissingInput("referents not read yet")
    return a, b, best_reading(readings[a])["value"], best_reading(readings[b])["value"]


def t_calc(ctx, params) -> ToolOutput:
    op = params.get("op", "compare")
    operands = params.get("operands")
    out = ToolOutput("", [], {})
    if operands is None:
        if op != "compare":
            raise MissingInput(f"{op} needs explicit operands")
        a, b, va, vb = _compare_operands(ctx)
        res = reasoning.calc("compare", [va, vb])
        _ws(ctx)["compare"] = res
        out.artifacts.append(
            Artifact.inline(
                "reading",
                {
                    "target": f"compare:{a}:{b}",
                    "value": res,
                    "operands": [va, vb],
                    "candidate": {"kind": "ordering", "value": res},
                    "source": "calc",
                    "confidence": 1.0 - COMPARE_FLIP,
                },
            )
        )
        if ctx.question.task == VALUE_COMPARE:
            out.observations.append(Observation(_COMPARE_MODEL, res))
        out.summary = f"compare({va:.6g}, {vb:.6g}) = {res}"
    else:
        res = reasoning.calc(op, [float(v) for v in operands])
        out.artifacts.append(Artifact.inline("reading", {"op": op, "operands": operands, "value": res}))
        out.summary = f"{op}({operands}) = {res}"
    out.state = {"op": op, "result": res}
    return out


def t_build_relation_graph(ctx, params) -> ToolOutput:
    ws = _ws(ctx)
    ct = ws.get("chart_type")
    ke = ws.get("elements")
    seg = ws.get("segmentation")
    mapping: dict[str, list[str]] = {}
    if ct == "bar" and ke is not None and ws.get("series"):
        for (ci, sj), b in sorted(_bar_lookup(ctx).items()):
            mapping.setdefault(_series_key(ws["series"], sj), []).append(f"bar:{b}")
    elif seg is not None and ws.get("sector_label_list"):
        for i, lab in enumerate(ws["sector_label_list"]):
            mapping.setdefault(lab, []).append(f"sector:{i}")
    graph = reasoning.build_relation_graph(ke if ct == "bar" else None, seg.estimates if seg is not None else None, mapping)
    ws["graph"] = graph
    out = ToolOutput("", [Artifact.inline("reading", {"graph": graph.to_dict()})], {})
    rel = None
    targets = _question_targets(ctx) if ctx.question.task == VALUE_COMPARE else []
    if len(targets) >= 2:
        nodes = []
        for t in targets[:2]:
            cat, ser = t.split("|", 1)
            if ct == "bar":
                cats = _categories(ctx)
                ci = next((c["index"] for c in cats if _cat_key(c) == cat), None)
                sj = next((j for j in range(len(ws["series"])) if _series_key(ws["series"], j) == ser), None)
                b = _bar_lookup(ctx).get((ci, sj))
                nodes.append(f"bar:{b}" if b is not None else None)
            elif ws.get("sector_label_list") and cat in ws["sector_label_list"]:
                nodes.append(f"sector:{ws['sector_label_list'].index(cat)}")
            else:
                nodes.append(None)
        if None not in nodes:
            a, b = nodes
            if a.startswith("bar:"):
                rel = reasoning.above_relation(graph, a, b)
            else:
                pa, pb = graph.nodes[a]["proportion"], graph.nodes[b]["proportion"]
                rel = reasoning.calc("compare", [pa, pb])
    if rel is not None:
        ws["graph_relation"] = rel
        out.artifacts.append(
            Artifact.inline(
                "reading",
                {
                    "target": f"compare:{targets[0]}:{targets[1]}",
                    "value": rel,
                    "candidate": {"kind": "ordering", "value": rel},
                    "source": "build_relation_graph",
                    "confidence": 1.0 - GRAPH_FLIP,
                },
            )
        )
        out.observations.append(Observation(_GRAPH_MODEL, rel))
    n_edges = {k: len(graph.edges_of(k)) for k in ("left_of", "above", "legend_of", "same_series")}
    out.summary = f"graph {len(graph.nodes)} nodes, edges {n_edges}" + (f"; relation {rel}" if rel else "")
    out.state = {"nodes": len(graph.nodes), "edges": n_edges, "relation": rel}
    return out


def t_structure_table(ctx, params) -> ToolOutput:
    ws = _ws(ctx)
    readings = ws.get("readings") or {}
    if not readings:
        raise reasoning.EmptyInput("no readings to structure")
    ct = ws.get("chart_type")
    cells = []
    if ct in CIRCULAR:
        labels = ws.get("sector_label_list") or []
        rows = [(i, f"{lab}|{SHARE_COLUMN}") for i, lab in enumerate(labels)]
        mapping = {0: SHARE_COLUMN}
        for i, key in rows:
            if key in readings:
                r = best_reading(readings[key])
                cells.append(reasoning.CellReading(i, 0, r["value"], r["evidence_id"], r["source"]))
        row_labels = list(ws.get("sector_names") or [])
    else:
        cats = _categories(ctx)
        series = _need(ctx, "series")
        mapping = {j: s["label"] for j, s in enumerate(series) if s["label"]}
        for c in cats:
            for j in range(len(series)):
                key = f"{_cat_key(c)}|{_series_key(series, j)}"
                if key in readings:
                    r = best_reading(readings[key])
                    cells.append(reasoning.CellReading(c["index"], j, r["value"], r["evidence_id"], r["source"]))
        row_labels = [c["label"] for c in cats]
    table = reasoning.structure_table(cells, row_labels, mapping)
    ws["table"] = table
    positional = any(p["flags"] for p in table.provenance.values())
    complete = table.is_complete() and not positional
    out = ToolOutput(
        f"table {len(table.row_keys)}x{len(table.col_keys)} " + ("complete" if complete else "partial"),
        [
            Artifact.inline("table", table.to_dict()),
            Artifact.inline(
                "reading",
                {
                    "target": "table",
                    "value": "complete" if complete else "partial",
                    "candidate": {"kind": "table", "value": "table"},
                    "source": "structure_table",
                    "confidence": 1.0 if complete else 0.5,
                },
            ),
        ],
        {"rows": table.row_keys, "cols": table.col_keys, "complete": complete},
    )
    if ctx.question.task == CHART_TO_TABLE:
        out.observations.append(Observation(_TABLE_MODEL, "complete" if complete else "partial"))
    return out


# ---------------------------------------------------------------- readiness and default params


def _has(ctx, *keys) -> bool:
    return all(ctx.workspace.get(k) is not None for k in keys)


def _missing(ctx, key) -> bool:
    return key not in ctx.workspace


def _is(ctx, kinds) -> bool:
    return ctx.workspace.get("chart_type") in kinds


def _pending_targets(ctx) -> list[str]:
    ws = ctx.workspace
    done = ws.get("read_done", set())
    q = ctx.question
    if q.task == CHART_TO_TABLE:
        try:
            cats = _categories(ctx)
        except MissingInput:
            return ["*"]
        series = ws.get("series") or []
        keys = [f"{_cat_key(c)}|{_series_key(series, j)}" for c in cats for j in range(len(series))]
        return [k for k in keys if k not in done]
    return [t for t in _question_targets(ctx) if t not in done]


def _ready_auxline(ctx) -> bool:
    if not _is(ctx, CARTESIAN) or not _has(ctx, "calibration", "series", "elements"):
        return False
    if not _is(ctx, {"bar"}) and not _has(ctx, "skeletons"):
        return False
    return bool(_pending_targets(ctx))


def _params_auxline(ctx) -> dict:
    q = ctx.question
    if q.task == CHART_TO_TABLE:
        return {"targets": ["*"], "series": "*"}
    if not q.referents:
        return {"targets": ["*"]}
    p: dict[str, Any] = {"targets": list(q.referents)}
    j = _question_series(ctx)
    series = ctx.workspace.get("series") or []
    if j is not None and series and series[j]["label"]:
        p["series"] = series[j]["label"]
    return p


def _ready_match(ctx) -> bool:
    if not _missing(ctx, "legend_map") or "legend" not in ctx.workspace or not _has(ctx, "texts"):
        return False
    if _is(ctx, CIRCULAR):
        return _has(ctx, "segmentation")
    return _has(ctx, "elements")


def _ready_compare(ctx) -> bool:
    if ctx.question.task != VALUE_COMPARE or not _missing(ctx, "compare"):
        return False
    targets = _question_targets(ctx)
    r = ctx.workspace.get("readings", {})
    return len(targets) >= 2 and all(t in r for t in targets[:2])


def _ready_graph(ctx) -> bool:
    if ctx.question.task != VALUE_COMPARE or not _missing(ctx, "graph"):
        return False
    if _is(ctx, {"bar"}):
        return _has(ctx, "elements", "series") and len(_question_targets(ctx)) >= 2
    if _is(ctx, CIRCULAR):
        return _has(ctx, "segmentation", "sector_label_list")
    return False


def _ready_table(ctx) -> bool:
    if ctx.question.task != CHART_TO_TABLE or not _missing(ctx, "table"):
        return False
    if _is(ctx, CIRCULAR):
        return _has(ctx, "sector_label_list")
    return _has(ctx, "series", "calibration") and "read_done" in ctx.workspace and not _pending_targets(ctx)


TOOL_TABLE = [
    (
        ToolSpec(
            "classify_chart",
            "Route the chart to bar, line, pie, donut or scatter from layout evidence.",
            (),
            cost=0.2,
            prior_gain=1.0,
            quota=2,
            compatibility=ALL_TYPES,
            ready=lambda ctx: _missing(ctx, "chart_type"),
        ),
        t_classify_chart,
    ),
    (
        ToolSpec(
            "detect_key_elements",
            "Locate plot area, axes, ticks, legend swatches and bars.",
            (),
            cost=1.0,
            prior_gain=1.2,
            quota=2,
            compatibility=ALL_TYPES,
            ready=lambda ctx: _has(ctx, "chart_type") and _missing(ctx, "elements"),
        ),
        t_detect_key_elements,
    ),
    (
        ToolSpec(
            "read_text",
            "OCR every text item with its bounding box.",
            (),
            cost=1.0,
            prior_gain=1.0,
            quota=2,
            compatibility=ALL_TYPES,
            ready=lambda ctx: _missing(ctx, "texts") and _has(ctx, "chart_type"),
        ),
        t_read_text,
    ),
    (
        ToolSpec(
            "calibrate_axis",
            "Fit value = alpha*pixel + beta through the numeric tick labels.",
            (ParamField("axis", "str", False, "y", ("x", "y")),),
            cost=0.3,
            prior_gain=0.8,
            quota=2,
            compatibility=CARTESIAN,
            ready=lambda ctx: _is(ctx, CARTESIAN) and _has(ctx, "elements", "texts") and _missing(ctx, "calibration"),
        ),
        t_calibrate_axis,
    ),
    (
        ToolSpec(
            "match_colors_to_legend",
            "Bind legend labels to the data regions drawn in their colours.",
            (),
            cost=0.3,
            prior_gain=0.8,
            quota=2,
            compatibility=ALL_TYPES,
            ready=_ready_match,
        ),
        t_match_colors_to_legend,
    ),
    (
        ToolSpec(
            "extract_curve_skeleton",
            "Trace each line series (or scatter markers) as a polyline.",
            (),
            cost=1.0,
            prior_gain=1.0,
            quota=2,
            compatibility=frozenset({"line", "scatter"}),
            ready=lambda ctx: _is(ctx, {"line", "scatter"}) and _has(ctx, "series", "elements") and _missing(ctx, "skeletons"),
        ),
        t_extract_curve_skeleton,
    ),
    (
        ToolSpec(
            "read_via_auxline",
            "Project auxiliary lines from category anchors and read calibrated values.",
            (ParamField("targets", "list", False, None), ParamField("series", "str", False, None)),
            cost=0.5,
            prior_gain=1.2,
            quota=3,
            compatibility=CARTESIAN,
            ready=_ready_auxline,
            default_params=_params_auxline,
        ),
        t_read_via_auxline,
    ),
    (
        ToolSpec(
            "segment_sectors",
            "Segment the pie or donut region, cluster colours and measure shares.",
            (ParamField("annulus", "bool", False, None),),
            cost=1.0,
            prior_gain=1.2,
            quota=2,
            compatibility=CIRCULAR,
            ready=lambda ctx: _is(ctx, CIRCULAR) and "elements" in ctx.workspace and _missing(ctx, "segmentation"),
        ),
        t_segment_sectors,
    ),
    (
        ToolSpec(
            "calc",
            "Exact arithmetic: sum, normalize, ratio, diff, compare, scale.",
            (
                ParamField("op", "str", False, "compare", ("sum", "normalize", "ratio", "diff", "compare", "scale")),
                ParamField("operands", "list", False, None),
            ),
            cost=0.1,
            prior_gain=0.6,
            quota=3,
            compatibility=ALL_TYPES,
            tasks=frozenset({VALUE_COMPARE}),
            ready=_ready_compare,
        ),
        t_calc,
    ),
    (
        ToolSpec(
            "build_relation_graph",
            "Spatial and legend relations among bars and sectors.",
            (),
            cost=0.2,
            prior_gain=0.5,
            quota=2,
            compatibility=frozenset({"bar"}) | CIRCULAR,
            tasks=frozenset({VALUE_COMPARE}),
            ready=_ready_graph,
        ),
        t_build_relation_graph,
    ),
    (
        ToolSpec(
            "structure_table",
            "Assemble readings into a category by series table with provenance.",
            (),
            cost=0.3,
            prior_gain=0.8,
            quota=2,
            compatibility=ALL_TYPES,
            tasks=frozenset({CHART_TO_TABLE}),
            ready=_ready_table,
        ),
        t_structure_table,
    ),
]


def default_registry(exclude: tuple[str, ...] = ()) -> Registry:
    """The library tools in their canonical order, optionally without some."""
    reg = Registry(make_context)
    for spec, fn in TOOL_TABLE:
        if spec.name not in exclude:
            reg.register(spec, fn)
    return reg.freeze()
