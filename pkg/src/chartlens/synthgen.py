"""Synthetic chart generation with pixel-exact ground truth.

Every chart is drawn from a :class:`ChartSpec` by a deterministic
rasteriser; the :class:`GroundTruth` it returns records exactly what was
drawn (data table, geometry, text boxes), which makes it the oracle for
all perception tests.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from chartlens import font
from chartlens.image import ChartImage, decode_ppm, encode_ppm

CHART_TYPES = ("bar", "line", "pie", "donut", "scatter")
CARTESIAN = ("bar", "line", "scatter")
CIRCULAR = ("pie", "donut")

BACKGROUND = (255, 255, 255)
INK = (0, 0, 0)
DONUT_INNER_RATIO = 0.45
MIN_PIE_SHARE = 0.04
LINE_HALF_WIDTH = 1.5
MARKER_RADIUS = 3.5
TICK_LEN = 6
SWATCH = 10

# Well separated fills: every pair differs by > 90 in RGB distance.
PALETTE = (
    (214, 39, 40),
    (31, 119, 180),
    (44, 160, 44),
    (255, 127, 14),
    (148, 103, 189),
    (23, 190, 207),
    (227, 119, 194),
    (188, 189, 34),
    (140, 86, 75),
    (120, 120, 220),
)

_CATEGORY_SETS = (
    ("FORD", "TOYOTA", "HONDA", "KIA", "BMW", "AUDI", "TESLA", "VOLVO", "MAZDA", "FIAT", "OPEL", "JEEP"),
    ("JAN", "FEB", "MAR", "APR", "MAY", "JUN", "JUL", "AUG", "SEP", "OCT", "NOV", "DEC"),
    ("2013", "2014", "2015", "2016", "2017", "2018", "2019", "2020", "2021", "2022", "2023", "2024"),
    ("NORTH", "SOUTH", "EAST", "WEST", "CENTRE", "COAST", "ISLES", "UPLAND"),
    ("OSLO", "LIMA", "ROME", "PARIS", "CAIRO", "DELHI", "TOKYO", "SEOUL", "QUITO", "BERN"),
)
_SERIES_NAMES = ("SALES", "PROFIT", "COST", "EXPORTS", "IMPORTS", "USERS", "VISITS", "ORDERS")
_TITLES = ("ANNUAL REPORT", "UNITS SOLD", "MARKET DATA", "SURVEY RESULTS", "QUARTERLY FIGURES")
_TICK_STEPS = (0.5, 1.0, 2.0, 2.5, 5.0, 10.0, 20.0, 25.0, 50.0, 100.0, 200.0, 250.0, 500.0, 1000.0)


class UnsupportedChartType(ValueError):
    pass


class InvalidSpec(ValueError):
    pass


class CanvasTooSmall(ValueError):
    pass


@dataclass
class Series:
    label: str
    color: tuple[int, int, int]
    values: list[float]


@dataclass
class ChartSpec:
    chart_type: str
    series: list[Series]
    category_labels: list[str]
    axis_ranges: list[tuple[float, float]]
    tick_step: float
    annotated: bool = True
    canvas: tuple[int, int] = (512, 512)
    style_seed: int = 0
    edge_style: str = "hard"
    title: str = ""
    inner_radius_ratio: float = DONUT_INNER_RATIO
    category_colors: list[tuple[int, int, int]] = field(default_factory=list)  # pie/donut sectors

    def validate(self) -> None:
        if self.chart_type not in CHART_TYPES:
            raise UnsupportedChartType(self.chart_type)
        if not self.series:
            raise InvalidSpec("at least one series is required")
        n = len(self.category_labels)
        for s in self.series:
            if len(s.values) != n:
                raise InvalidSpec(f"series {s.label!r} has {len(s.values)} values for {n} categories")
        if not self.tick_step > 0:
            raise InvalidSpec("tick_step must be positive")
        if self.canvas[0] < 128 or self.canvas[1] < 128:
            raise InvalidSpec("canvas must be at least 128x128")
        if self.edge_style not in ("hard", "soft"):
            raise InvalidSpec(f"unknown edge style {self.edge_style!r}")
        if self.chart_type in CIRCULAR:
            vals = self.series[0].values
            if any(v < 0 for v in vals) or sum(vals) <= 0:
                raise InvalidSpec("pie values must be nonnegative with a positive total")
            if len(self.category_colors) != n:
                raise InvalidSpec("pie/donut charts need one colour per sector")
        else:
            if not self.axis_ranges:
                raise InvalidSpec("cartesian charts need a value-axis range")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["canvas"] = list(self.canvas)
        d["axis_ranges"] = [list(r) for r in self.axis_ranges]
        for s in d["series"]:
            s["color"] = list(s["color"])
        d["category_colors"] = [list(c) for c in self.category_colors]
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ChartSpec":
        d = dict(d)
        d["series"] = [
            Series(s["label"], tuple(int(c) for c in s["color"]), [float(v) for v in s["values"]])
            for s in d["series"]
        ]
        d["axis_ranges"] = [tuple(float(v) for v in r) for r in d.get("axis_ranges", [])]
        d["canvas"] = tuple(int(v) for v in d.get("canvas", (512, 512)))
        d["category_colors"] = [tuple(int(v) for v in col) for col in d.get("category_colors", [])]
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


@dataclass
class TextItem:
    text: str
    box: tuple[int, int, int, int]  # left, top, right, bottom (inclusive)
    role: str


@dataclass
class GroundTruth:
    chart_type: str
    data_table: list[tuple[str, str, float]]
    text_items: list[TextItem]
    edge_style: str = "hard"
    plot_area: tuple[int, int, int, int] | None = None
    x_axis: tuple[int, int, int, int] | None = None  # x0, y0, x1, y1
    y_axis: tuple[int, int, int, int] | None = None
    tick_anchors: list[dict[str, Any]] = field(default_factory=list)
    category_anchors: list[dict[str, Any]] = field(default_factory=list)
    legend_swatches: list[dict[str, Any]] = field(default_factory=list)
    bars: list[dict[str, Any]] = field(default_factory=list)
    sectors: list[dict[str, Any]] = field(default_factory=list)
    circle: dict[str, float] | None = None
    curves: list[dict[str, Any]] = field(default_factory=list)
    tick_step: float | None = None
    pixels_per_tick: int | None = None

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["data_table"] = [list(r) for r in self.data_table]
        for key in ("plot_area", "x_axis", "y_axis"):
            if d[key] is not None:
                d[key] = list(d[key])
        for t in d["text_items"]:
            t["box"] = list(t["box"])
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "GroundTruth":
        d = dict(d)
        d["data_table"] = [(str(r), str(c), float(v)) for r, c, v in d["data_table"]]
        d["text_items"] = [TextItem(t["text"], tuple(t["box"]), t["role"]) for t in d["text_items"]]
        for key in ("plot_area", "x_axis", "y_axis"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)

    def value_labels(self) -> list[TextItem]:
        return [t for t in self.text_items if t.role == "value_label"]


# ---------------------------------------------------------------- formatting


def step_decimals(step: float) -> int:
    for d in range(0, 4):
        if abs(round(step, d) - step) < 1e-9:
            return d
    return 3


def value_decimals(step: float) -> int:
    """Declared precision of generated data values for a given tick step."""
    if step < 1:
        return 2
    if step < 10:
        return 1
    return 0


def format_number(value: float, decimals: int) -> str:
    text = f"{value:,.{decimals}f}"
    return text


def format_value_label(value: float, decimals: int) -> str:
    text = f"{value:,.{decimals}f}"
    if "." in text:
        text = text.rstrip("0").rstrip(".")
    return text


# ---------------------------------------------------------------- generation


def _rng_for(chart_type: str, seed: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, CHART_TYPES.index(chart_type)])


def generate_spec(chart_type: str, rng_seed: int, constraints: dict[str, Any] | None = None) -> ChartSpec:
    """Deterministic random spec for ``chart_type``.

    Recognised ``constraints`` keys: n_series, n_categories, n_sectors,
    min_share, canvas, annotated, edge_style.
    """
    if chart_type not in CHART_TYPES:
        raise UnsupportedChartType(chart_type)
    c = dict(constraints or {})
    rng = _rng_for(chart_type, rng_seed)
    canvas = tuple(c.get("canvas", (512, 512)))
    annotated = bool(c.get("annotated", True))
    edge_style = c.get("edge_style") or ("hard" if rng.random() < 0.5 else "soft")
    title = _TITLES[int(rng.integers(len(_TITLES)))]

    if chart_type in CIRCULAR:
        n = int(c.get("n_sectors", rng.integers(3, 9)))
        min_share = float(c.get("min_share", MIN_PIE_SHARE))
        if n * min_share > 1:
            raise InvalidSpec("minimum share infeasible for sector count")
        raw = rng.dirichlet(np.full(n, 1.5))
        shares = min_share + (1.0 - n * min_share) * raw
        values = [round(100.0 * s, 1) for s in shares]
        values[int(np.argmax(values))] += round(100.0 - sum(values), 1)
        values = [round(v, 1) for v in values]
        labels = _pick_categories(rng, n)
        colors = _pick_colors(rng, n)
        return ChartSpec(
            chart_type,
            [Series("SHARE", colors[0], values)],
            labels,
            [],
            10.0,
            annotated,
            canvas,
            int(rng_seed),
            edge_style,
            title,
            category_colors=colors,
        )

    if chart_type == "bar":
        n_series = int(c.get("n_series", rng.choice([1, 1, 2, 3])))
        n_cat = int(c.get("n_categories", rng.integers(3, 8 if n_series == 1 else 6)))
    elif chart_type == "line":
        n_series = int(c.get("n_series", rng.choice([1, 1, 2, 3])))
        n_cat = int(c.get("n_categories", rng.integers(4, 10)))
    else:
        n_series = int(c.get("n_series", rng.choice([1, 2])))
        n_cat = int(c.get("n_categories", rng.integers(5, 11)))
    step = float(_TICK_STEPS[int(rng.integers(len(_TICK_STEPS)))])
    n_int = int(rng.integers(4, 9))
    ymax = step * n_int
    dec = value_decimals(step)
    labels = _pick_categories(rng, n_cat)
    colors = _pick_colors(rng, n_series, min_hue_gap=25.0)
    names = list(rng.permutation(_SERIES_NAMES)[:n_series])
    series = []
    for s in range(n_series):
        vals = rng.uniform(0.15, 0.9, size=n_cat) * ymax
        series.append(Series(str(names[s]), colors[s], [round(float(v), dec) for v in vals]))
    return ChartSpec(
        chart_type, series, labels, [(0.0, ymax)], step, annotated, canvas, int(rng_seed), edge_style, title
    )


def _pick_categories(rng: np.random.Generator, n: int) -> list[str]:
    pools = [p for p in _CATEGORY_SETS if len(p) >= n]
    pool = pools[int(rng.integers(len(pools)))]
    if pool[0] in ("JAN", "2013"):
        start = int(rng.integers(0, len(pool) - n + 1))
        return list(pool[start : start + n])
    idx = rng.choice(len(pool), size=n, replace=False)
    return [pool[i] for i in idx]


def _hue(color) -> float:
    import colorsys

    r, g, b = (c / 255.0 for c in color)
    return colorsys.rgb_to_hsv(r, g, b)[0] * 360.0


def _pick_colors(rng: np.random.Generator, n: int, min_hue_gap: float = 0.0) -> list[tuple[int, int, int]]:
    """``n`` palette colours; series colours also keep their hues apart."""
    order = rng.permutation(len(PALETTE))
    chosen: list[tuple[int, int, int]] = []
    for i in order:
        col = PALETTE[i]
        gaps = [abs((_hue(col) - _hue(c) + 180.0) % 360.0 - 180.0) for c in chosen]
        if all(g >= min_hue_gap for g in gaps):
            chosen.append(col)
        if len(chosen) == n:
            return chosen
    raise InvalidSpec(f"cannot pick {n} colours {min_hue_gap} degrees apart")


def deannotate(spec: ChartSpec) -> ChartSpec:
    """Same chart without value labels; the data is untouched."""
    if not spec.annotated:
        return spec
    return replace(spec, annotated=False)


# ---------------------------------------------------------------- rendering


class _Canvas:
    def __init__(self, width: int, height: int) -> None:
        self.w = width
        self.h = height
        self.px = np.empty((height, width, 3), dtype=np.uint8)
        self.px[:] = BACKGROUND
        self.texts: list[TextItem] = []

    def fill(self, left: int, top: int, right: int, bottom: int, color) -> None:
        self.px[max(top, 0) : bottom + 1, max(left, 0) : right + 1] = color

    def text(self, s: str, left: int, top: int, role: str, scale: int = 1) -> TextItem:
        s = font.normalize_text(s)
        mask = font.render_text_mask(s, scale)
        h, w = mask.shape
        if left < 0 or top < 0 or left + w > self.w or top + h > self.h:
            raise CanvasTooSmall(f"text {s!r} does not fit at ({left}, {top})")
        region = self.px[top : top + h, left : left + w]
        region[mask] = INK
        item = TextItem(s, (left, top, left + w - 1, top + h - 1), role)
        self.texts.append(item)
        return item

    def text_centered(self, s: str, cx: float, top: int, role: str, scale: int = 1) -> TextItem:
        w, _ = font.text_size(font.normalize_text(s), scale)
        return self.text(s, int(round(cx - (w - 1) / 2.0)), top, role, scale)

    def blend(self, left: int, top: int, alpha: np.ndarray, color) -> None:
        """Alpha-composite ``color`` over the block whose top-left is (left, top)."""
        h, w = alpha.shape
        region = self.px[top : top + h, left : left + w].astype(np.float64)
        a = alpha[..., None]
        out = region * (1.0 - a) + np.asarray(color, dtype=np.float64) * a
        self.px[top : top + h, left : left + w] = np.rint(out).astype(np.uint8)


def _title(cv: _Canvas, title: str) -> None:
    if not title:
        return
    scale = 2
    if font.text_size(font.normalize_text(title), 2)[0] > cv.w - 16:
        scale = 1
    cv.text_centered(title, (cv.w - 1) / 2.0, 8, "title", scale)


def _legend(cv: _Canvas, entries, top: int) -> list[dict[str, Any]]:
    width = SWATCH + 4 + max(font.text_size(font.normalize_text(lab))[0] for lab, _ in entries)
    left = cv.w - 8 - width
    out = []
    for i, (label, color) in enumerate(entries):
        y = top + i * 16
        if y + SWATCH > cv.h:
            raise CanvasTooSmall("legend does not fit")
        cv.fill(left, y, left + SWATCH - 1, y + SWATCH - 1, color)
        item = cv.text(label, left + SWATCH + 4, y + 1, "legend_label")
        out.append(
            {
                "label": item.text,
                "box": [left, y, left + SWATCH - 1, y + SWATCH - 1],
                "color": list(color),
                "label_box": list(item.box),
            }
        )
    return out


def _segment_distance(xs: np.ndarray, ys: np.ndarray, p, q) -> np.ndarray:
    px, py = p
    qx, qy = q
    dx, dy = qx - px, qy - py
    ll = dx * dx + dy * dy
    if ll == 0:
        return np.hypot(xs - px, ys - py)
    t = np.clip(((xs - px) * dx + (ys - py) * dy) / ll, 0.0, 1.0)
    return np.hypot(xs - (px + t * dx), ys - (py + t * dy))


def _stroke(cv: _Canvas, points, color, radius: float, soft: bool, connect: bool) -> None:
    pts = [(float(x), float(y)) for x, y in points]
    xs_all = [p[0] for p in pts]
    ys_all = [p[1] for p in pts]
    pad = radius + 2
    left = max(int(math.floor(min(xs_all) - pad)), 0)
    right = min(int(math.ceil(max(xs_all) + pad)), cv.w - 1)
    top = max(int(math.floor(min(ys_all) - pad)), 0)
    bottom = min(int(math.ceil(max(ys_all) + pad)), cv.h - 1)
    ys, xs = np.mgrid[top : bottom + 1, left : right + 1].astype(np.float64)
    dist = np.full(xs.shape, np.inf)
    if connect and len(pts) > 1:
        for p, q in zip(pts, pts[1:]):
            dist = np.minimum(dist, _segment_distance(xs, ys, p, q))
    else:
        for p in pts:
            dist = np.minimum(dist, np.hypot(xs - p[0], ys - p[1]))
    if soft:
        alpha = np.clip(radius + 0.5 - dist, 0.0, 1.0)
    else:
        alpha = (dist <= radius).astype(np.float64)
    cv.blend(left, top, alpha, color)


def render(spec: ChartSpec) -> tuple[ChartImage, GroundTruth]:
    """Rasterise ``spec``; identical specs give byte-identical output."""
    spec.validate()
    if spec.chart_type in CIRCULAR:
        return _render_circular(spec)
    return _render_cartesian(spec)


def _render_cartesian(spec: ChartSpec) -> tuple[ChartImage, GroundTruth]:
    W, H = spec.canvas
    cv = _Canvas(W, H)
    ymin, ymax = spec.axis_ranges[0]
    step = spec.tick_step
    n_int = int(round((ymax - ymin) / step))
    if n_int < 1 or abs(n_int * step - (ymax - ymin)) > 1e-9 * max(1.0, abs(ymax)):
        raise InvalidSpec("axis range must be a whole number of tick steps")
    tick_dec = step_decimals(step)
    val_dec = max(value_decimals(step), tick_dec)
    tick_values = [ymin + i * step for i in range(n_int + 1)]
    tick_texts = [format_number(v, tick_dec) for v in tick_values]
    max_tick_w = max(font.text_size(t)[0] for t in tick_texts)

    _title(cv, spec.title)
    x0 = 8 + max_tick_w + 3 + TICK_LEN
    entries = [(s.label, s.color) for s in spec.series]
    legend_w = SWATCH + 4 + max(font.text_size(font.normalize_text(s.label))[0] for s in spec.series)
    x1 = W - 8 - legend_w - 12
    y0 = H - 30
    ppt = (y0 - 40) // n_int
    if ppt < 4 or x1 - x0 < 40:
        raise CanvasTooSmall("plot area too small for the axis range")
    top = y0 - ppt * n_int
    n_cat = len(spec.category_labels)
    cat_w = (x1 - x0) / n_cat
    n_series = len(spec.series)
    if spec.chart_type == "bar" and int(0.7 * cat_w / n_series) < 2:
        raise CanvasTooSmall("bars would be narrower than 2 px")
    centers = [int(round(x0 + (j + 0.5) * cat_w)) for j in range(n_cat)]

    def row_of(v: float) -> float:
        return y0 - (v - ymin) / step * ppt

    # axes and ticks
    cv.fill(x0, top, x0, y0, INK)
    cv.fill(x0, y0, x1, y0, INK)
    tick_anchors = []
    for i, (v, t) in enumerate(zip(tick_values, tick_texts)):
        r = y0 - i * ppt
        cv.fill(x0 - TICK_LEN, r, x0 - 1, r, INK)
        w, _ = font.text_size(t)
        item = cv.text(t, x0 - TICK_LEN - 3 - w, r - 3, "tick_label")
        tick_anchors.append({"axis": "y", "pixel": r, "value": v, "label_box": list(item.box)})
    category_anchors = []
    for j, (cx, lab) in enumerate(zip(centers, spec.category_labels)):
        cv.fill(cx, y0 + 1, cx, y0 + 5, INK)
        item = cv.text_centered(lab, cx, y0 + 9, "tick_label")
        tick_anchors.append({"axis": "x", "pixel": cx, "value": None, "label_box": list(item.box)})
        category_anchors.append({"index": j, "label": item.text, "pixel": cx})
    legend = _legend(cv, entries, top + 4)

    soft = spec.edge_style == "soft"
    bars: list[dict[str, Any]] = []
    curves: list[dict[str, Any]] = []
    data_table = []
    labels_to_draw = []
    if spec.chart_type == "bar":
        bw = int(0.7 * cat_w / n_series)
        for j, cx in enumerate(centers):
            left0 = cx - (bw * n_series) // 2
            for s_idx, s in enumerate(spec.series):
                v = s.values[j]
                l = left0 + s_idx * bw
                r = l + bw - 1
                h = int(round((v - ymin) / step * ppt))
                t = y0 - h
                if h > 0:
                    cv.fill(l, t, r, y0 - 1, s.color)
                bars.append(
                    {
                        "category": spec.category_labels[j],
                        "series": s.label,
                        "box": [l, t, r, y0 - 1],
                        "value": v,
                        "color": list(s.color),
                    }
                )
                labels_to_draw.append((format_value_label(v, val_dec), (l + r) / 2.0, t - 9))
    else:
        for s in spec.series:
            pts = [(float(cx), row_of(v)) for cx, v in zip(centers, s.values)]
            curves.append({"series": s.label, "color": list(s.color), "points": [list(p) for p in pts]})
            for (x, y), v in zip(pts, s.values):
                labels_to_draw.append((format_value_label(v, val_dec), x, int(round(y)) - 13))
    for s in spec.series:
        for lab, v in zip(spec.category_labels, s.values):
            data_table.append((font.normalize_text(lab), font.normalize_text(s.label), float(v)))

    if spec.annotated:
        for text, cx, ty in labels_to_draw:
            cv.text_centered(text, cx, max(ty, 0), "value_label")
    for c in curves:
        _stroke(
            cv,
            c["points"],
            tuple(c["color"]),
            LINE_HALF_WIDTH if spec.chart_type == "line" else MARKER_RADIUS,
            soft,
            connect=spec.chart_type == "line",
        )

    gt = GroundTruth(
        chart_type=spec.chart_type,
        data_table=data_table,
        text_items=cv.texts,
        edge_style=spec.edge_style,
        plot_area=(x0, top, x1, y0),
        x_axis=(x0, y0, x1, y0),
        y_axis=(x0, top, x0, y0),
        tick_anchors=tick_anchors,
        category_anchors=category_anchors,
        legend_swatches=legend,
        bars=bars,
        curves=curves,
        tick_step=step,
        pixels_per_tick=ppt,
    )
    return ChartImage(cv.px), gt


def sector_index(phi: np.ndarray, ends: np.ndarray) -> np.ndarray:
    """Sector owning clockwise-from-12-o'clock angle ``phi`` (degrees)."""
    return np.clip(np.searchsorted(ends, phi, side="right"), 0, len(ends) - 1)


def _render_circular(spec: ChartSpec) -> tuple[ChartImage, GroundTruth]:
    W, H = spec.canvas
    cv = _Canvas(W, H)
    _title(cv, spec.title)
    values = np.asarray(spec.series[0].values, dtype=np.float64)
    total = values.sum()
    shares = values / total
    ends = np.cumsum(shares) * 360.0
    ends[-1] = 360.0
    starts = np.concatenate([[0.0], ends[:-1]])
    R = 0.29 * min(W, H)
    cx = W * 0.40
    cy = H * 0.53
    donut = spec.chart_type == "donut"
    r_in = spec.inner_radius_ratio * R if donut else 0.0
    colors = np.asarray(spec.category_colors, dtype=np.float64)

    entries = list(zip(spec.category_labels, spec.category_colors))
    legend_w = SWATCH + 4 + max(font.text_size(font.normalize_text(l))[0] for l in spec.category_labels)
    if W - 8 - legend_w < cx + R + 16 + 20:
        raise CanvasTooSmall("legend overlaps the pie")

    left = int(math.floor(cx - R - 2))
    right = int(math.ceil(cx + R + 2))
    top = int(math.floor(cy - R - 2))
    bottom = int(math.ceil(cy + R + 2))
    if left < 0 or top < 0 or right >= W or bottom >= H:
        raise CanvasTooSmall("pie does not fit")
    ys, xs = np.mgrid[top : bottom + 1, left : right + 1].astype(np.float64)

    def classify(xx: np.ndarray, yy: np.ndarray):
        dx = xx - cx
        dy = yy - cy
        rr = np.hypot(dx, dy)
        phi = np.degrees(np.arctan2(dx, -dy)) % 360.0
        inside = rr <= R
        if donut:
            inside &= rr >= r_in
        return inside, sector_index(phi, ends), rr, phi

    inside, idx, rr, phi = classify(xs, ys)
    block = np.empty(xs.shape + (3,), dtype=np.float64)
    block[:] = BACKGROUND
    block[inside] = colors[idx[inside]]
    if spec.edge_style == "soft":
        edge = np.abs(rr - R) < 1.0
        if donut:
            edge |= np.abs(rr - r_in) < 1.0
        bound = np.concatenate([starts, ends])
        ang = np.abs(((phi[..., None] - bound) + 180.0) % 360.0 - 180.0).min(axis=-1)
        edge |= (np.radians(ang) * rr < 1.5) & (rr < R + 1.0)
        ey, ex = np.nonzero(edge)
        n_sub = 4
        offs = (np.arange(n_sub) + 0.5) / n_sub - 0.5
        oy, ox = np.meshgrid(offs, offs, indexing="ij")
        sx = xs[ey, ex][:, None] + ox.reshape(1, -1)
        sy = ys[ey, ex][:, None] + oy.reshape(1, -1)
        s_in, s_idx, _, _ = classify(sx, sy)
        sub = np.empty(sx.shape + (3,), dtype=np.float64)
        sub[:] = BACKGROUND
        sub[s_in] = colors[s_idx[s_in]]
        block[ey, ex] = sub.mean(axis=1)
    cv.px[top : bottom + 1, left : right + 1] = np.rint(block).astype(np.uint8)

    sectors = []
    data_table = []
    for i, (lab, v) in enumerate(zip(spec.category_labels, values)):
        sectors.append(
            {
                "label": font.normalize_text(lab),
                "start": float(starts[i]),
                "end": float(ends[i]),
                "value": float(v),
                "share": float(shares[i]),
                "color": list(spec.category_colors[i]),
            }
        )
        data_table.append(
            (font.normalize_text(lab), font.normalize_text(spec.series[0].label), float(v))
        )
    if spec.annotated:
        for i, v in enumerate(values):
            mid = math.radians((starts[i] + ends[i]) / 2.0)
            tx = cx + (R + 16) * math.sin(mid)
            ty = cy - (R + 16) * math.cos(mid)
            cv.text_centered(format_value_label(float(v), 1) + "%", tx, int(round(ty - 3)), "value_label")
    legend = _legend(cv, entries, int(cy - R))

    gt = GroundTruth(
        chart_type=spec.chart_type,
        data_table=data_table,
        text_items=cv.texts,
        edge_style=spec.edge_style,
        legend_swatches=legend,
        sectors=sectors,
        circle={"cx": cx, "cy": cy, "r_outer": R, "r_inner": r_in, "inner_radius_ratio": spec.inner_radius_ratio if donut else 0.0},
    )
    return ChartImage(cv.px), gt


# ---------------------------------------------------------------- corpus i/o


class IoFailure(OSError):
    pass


@dataclass
class CorpusManifest:
    directory: Path
    rows: list[dict[str, Any]]

    def to_dict(self) -> dict[str, Any]:
        return {"count": len(self.rows), "rows": self.rows}


def _dump_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, ensure_ascii=False)


def write_corpus(specs: list[ChartSpec], directory: str | Path, prefix: str = "chart") -> CorpusManifest:
    """Write ``<prefix>_NNNN.ppm`` + ``<prefix>_NNNN.json`` per spec and a manifest."""
    directory = Path(directory)
    rows = []
    try:
        directory.mkdir(parents=True, exist_ok=True)
        for i, spec in enumerate(specs):
            image, gt = render(spec)
            stem = f"{prefix}_{i:04d}"
            (directory / f"{stem}.ppm").write_bytes(encode_ppm(image))
            truth = {"spec": spec.to_dict(), "ground_truth": gt.to_dict()}
            (directory / f"{stem}.json").write_text(_dump_json(truth), encoding="utf-8")
            rows.append(
                {
                    "index": i,
                    "image": f"{stem}.ppm",
                    "truth": f"{stem}.json",
                    "chart_type": spec.chart_type,
                    "seed": spec.style_seed,
                    "annotated": spec.annotated,
                }
            )
        manifest = CorpusManifest(directory, rows)
        (directory / "manifest.json").write_text(_dump_json(manifest.to_dict()), encoding="utf-8")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return manifest


def read_manifest(directory: str | Path) -> CorpusManifest:
    directory = Path(directory)
    data = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    return CorpusManifest(directory, data["rows"])


def load_truth(path: str | Path) -> tuple[ChartSpec, GroundTruth]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return ChartSpec.from_dict(data["spec"]), GroundTruth.from_dict(data["ground_truth"])


def load_corpus_item(directory: str | Path, row: dict[str, Any]) -> tuple[ChartImage, ChartSpec, GroundTruth]:
    directory = Path(directory)
    image = decode_ppm((directory / row["image"]).read_bytes())
    spec, gt = load_truth(directory / row["truth"])
    return image, spec, gt
