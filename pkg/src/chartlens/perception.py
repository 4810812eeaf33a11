"""Geometric vision tools: key elements, calibration, curves, sectors, legends.

Every detector here is a deterministic rule over pixel masks. Each one
stands behind the same interface a learned detector would use, so a
trained model can replace it without touching the orchestration layer.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from chartlens import raster
from chartlens.image import ChartImage
from chartlens.ocr import OcrBackend, TextItem
from chartlens.raster import ColorCluster

Box = tuple[int, int, int, int]  # left, top, right, bottom (inclusive)
Segment = tuple[int, int, int, int]  # x0, y0, x1, y1

DARK_MAX = 100  # max channel value for axis / text ink
COLOR_S_MIN = 0.15
COLOR_V_MIN = 0.35
WHITE_MIN = 235
MIN_AXIS_FRACTION = 0.25
AUX_COLOR = (255, 0, 255)


class NoAxesFound(ValueError):
    pass


class SeriesNotFound(ValueError):
    pass


class InsufficientAnchors(ValueError):
    pass


class DegenerateAnchors(ValueError):
    pass


class NoIntersection(ValueError):
    pass


class NoCircularRegion(ValueError):
    pass


class KSelectionFailed(ValueError):
    pass


class LegendNotFound(ValueError):
    pass


# ---------------------------------------------------------------- types


@dataclass
class Tick:
    axis: str  # "x" or "y"
    pixel: int
    label_box: Box | None = None
    confidence: float = 1.0


@dataclass
class LegendEntry:
    swatch_box: Box
    label_box: Box | None
    color: tuple[int, int, int]
    confidence: float = 1.0


@dataclass
class BarRect:
    box: Box
    color: tuple[int, int, int]
    confidence: float = 1.0

    @property
    def center_x(self) -> float:
        return (self.box[0] + self.box[2]) / 2.0


@dataclass
class KeyElements:
    plot_area: Box | None
    x_axis: Segment | None
    y_axis: Segment | None
    ticks: list[Tick] = field(default_factory=list)
    legend_entries: list[LegendEntry] = field(default_factory=list)
    bars: list[BarRect] = field(default_factory=list)
    axis_confidence: float = 0.0
    overlay: ChartImage | None = None

    def ticks_on(self, axis: str) -> list[Tick]:
        return [t for t in self.ticks if t.axis == axis]

    def summary(self) -> dict:
        return {
            "axes": self.plot_area is not None,
            "plot_area": list(self.plot_area) if self.plot_area else None,
            "x_ticks": len(self.ticks_on("x")),
            "y_ticks": len(self.ticks_on("y")),
            "legend_entries": len(self.legend_entries),
            "bars": len(self.bars),
        }

    def to_dict(self) -> dict:
        return {
            "plot_area": list(self.plot_area) if self.plot_area else None,
            "x_axis": list(self.x_axis) if self.x_axis else None,
            "y_axis": list(self.y_axis) if self.y_axis else None,
            "ticks": [
                {"axis": t.axis, "pixel": t.pixel, "label_box": list(t.label_box) if t.label_box else None, "confidence": t.confidence}
                for t in self.ticks
            ],
            "legend_entries": [
                {"swatch_box": list(e.swatch_box), "label_box": list(e.label_box) if e.label_box else None, "color": list(e.color), "confidence": e.confidence}
                for e in self.legend_entries
            ],
            "bars": [{"box": list(b.box), "color": list(b.color), "confidence": b.confidence} for b in self.bars],
            "axis_confidence": self.axis_confidence,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KeyElements":
        def box(v):
            return tuple(int(x) for x in v) if v is not None else None

        return cls(
            plot_area=box(d.get("plot_area")),
            x_axis=box(d.get("x_axis")),
            y_axis=box(d.get("y_axis")),
            ticks=[Tick(t["axis"], int(t["pixel"]), box(t.get("label_box")), t.get("confidence", 1.0)) for t in d.get("ticks", [])],
            legend_entries=[
                LegendEntry(box(e["swatch_box"]), box(e.get("label_box")), tuple(e["color"]), e.get("confidence", 1.0))
                for e in d.get("legend_entries", [])
            ],
            bars=[BarRect(box(b["box"]), tuple(b["color"]), b.get("confidence", 1.0)) for b in d.get("bars", [])],
            axis_confidence=d.get("axis_confidence", 0.0),
        )


@dataclass(frozen=True)
class Calibration:
    alpha: float
    beta: float
    axis: str
    residual_rms: float
    anchor_count: int

    def value_at(self, pixel: float) -> float:
        return self.alpha * pixel + self.beta

    def pixel_of(self, value: float) -> float:
        return (value - self.beta) / self.alpha

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "beta": self.beta,
            "axis": self.axis,
            "residual_rms": self.residual_rms,
            "anchor_count": self.anchor_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Calibration":
        return cls(float(d["alpha"]), float(d["beta"]), d["axis"], float(d["residual_rms"]), int(d["anchor_count"]))


@dataclass
class CurveSkeleton:
    series_color: tuple[int, int, int]
    points: list[tuple[float, float]]
    kind: str = "skeleton"  # or "markers" for scatter centroids
    mask: np.ndarray | None = field(default=None, repr=False, compare=False)

    def x_extent(self) -> tuple[float, float]:
        return self.points[0][0], self.points[-1][0]

    def y_at(self, x: float) -> float:
        xs = np.array([p[0] for p in self.points], dtype=np.float64)
        ys = np.array([p[1] for p in self.points], dtype=np.float64)
        if x < xs[0] or x > xs[-1]:
            raise NoIntersection(f"x={x} outside curve extent [{xs[0]}, {xs[-1]}]")
        return float(np.interp(x, xs, ys))


@dataclass
class SectorEstimate:
    cluster: ColorCluster
    components: int
    proportion: float
    implied_angle: float

    @property
    def color(self) -> tuple[int, int, int]:
        return tuple(int(round(c)) for c in self.cluster.centroid)


@dataclass
class SectorSegmentation:
    estimates: list[SectorEstimate]
    center: tuple[float, float]
    r_outer: float
    r_inner: float
    k: int
    k_source: str  # "legend", "palette" or "elbow"
    mask: np.ndarray = field(repr=False)


@dataclass
class NumericReading:
    value: float
    pixel: float
    target: float
    overlay: ChartImage | None = field(default=None, repr=False)
    tick_units: float | None = None


@dataclass
class LegendMatch:
    mapping: dict[str, int]  # legend label -> region index
    distances: dict[str, float]
    count_mismatch: bool


# ---------------------------------------------------------------- masks


def dark_mask(image: ChartImage) -> np.ndarray:
    return image.pixels.max(axis=2) < DARK_MAX


def color_mask(image: ChartImage) -> np.ndarray:
    """Saturated, reasonably bright pixels (S and V straight from max/min)."""
    px = image.pixels
    mx = px.max(axis=2).astype(np.float64)
    mn = px.min(axis=2)
    return (mx - mn >= COLOR_S_MIN * mx) & (mx > 0) & (mx >= COLOR_V_MIN * 255.0)


def _longest_run(mask: np.ndarray, vertical: bool) -> tuple[int, int, int] | None:
    """Longest straight run as (line index, start, stop inclusive)."""
    struct = np.array([[0, 1, 0], [0, 1, 0], [0, 1, 0]], bool) if vertical else np.array([[0, 0, 0], [1, 1, 1], [0, 0, 0]], bool)
    labels, n = ndimage.label(mask, structure=struct)
    if n == 0:
        return None
    sizes = ndimage.sum_labels(mask, labels, index=np.arange(1, n + 1))
    best = int(np.argmax(sizes))
    sl = ndimage.find_objects(labels)[best]
    if vertical:
        return sl[1].start, sl[0].start, sl[0].stop - 1
    return sl[0].start, sl[1].start, sl[1].stop - 1


def _runs(flags: np.ndarray) -> list[tuple[int, int]]:
    """Inclusive (start, stop) of consecutive True runs in a 1-D array."""
    padded = np.concatenate([[False], flags.astype(bool), [False]])
    d = np.diff(padded.astype(np.int8))
    starts = np.nonzero(d == 1)[0]
    stops = np.nonzero(d == -1)[0] - 1
    return list(zip(starts.tolist(), stops.tolist()))


def _text_blobs(ink: np.ndarray, gap: int = 3) -> list[Box]:
    grown = ndimage.binary_dilation(ink, structure=np.ones((1, gap), bool))
    labels, n = ndimage.label(grown & ~np.zeros_like(ink), structure=np.ones((3, 3), bool))
    boxes = []
    for sl in ndimage.find_objects(labels):
        ys, xs = np.nonzero(ink[sl])
        if len(ys) == 0:
            continue
        boxes.append(
            (sl[1].start + int(xs.min()), sl[0].start + int(ys.min()), sl[1].start + int(xs.max()), sl[0].start + int(ys.max()))
        )
    return boxes


# ---------------------------------------------------------------- detection


def detect_legend(image: ChartImage, exclude: Box | None = None) -> list[LegendEntry]:
    """Small, uniform, near-square coloured patches with text to their right."""
    colored = color_mask(image)
    ink = dark_mask(image)
    blobs = _text_blobs(ink)
    entries = []
    for comp in raster.connected_components(colored, connectivity=4):
        l, t, r, b = comp.bbox
        w, h = comp.width, comp.height
        if not (6 <= w <= 24 and 6 <= h <= 24 and abs(w - h) <= 2):
            continue
        if comp.fill_ratio < 0.95:
            continue
        if exclude is not None and l > exclude[0] and r < exclude[2] and t > exclude[1] and b < exclude[3]:
            continue
        px = image.pixels[comp.pixels[:, 0], comp.pixels[:, 1]].astype(np.int64)
        if np.abs(px - px[0]).max() > 6:
            continue
        label_box = None
        for bl, bt, br, bb in blobs:
            if r < bl <= r + 10 and bt <= b and bb >= t:
                if label_box is None or bl < label_box[0]:
                    label_box = (bl, bt, br, bb)
        if label_box is None:
            continue
        color = tuple(int(v) for v in np.median(px, axis=0))
        entries.append(LegendEntry((l, t, r, b), label_box, color, float(comp.fill_ratio)))
    entries.sort(key=lambda e: (e.swatch_box[1], e.swatch_box[0]))
    return entries


def detect_key_elements(image: ChartImage) -> KeyElements:
    """Axes, ticks, legend and bar rectangles of a cartesian chart.

    Raises ``NoAxesFound`` when no sufficiently long orthogonal dark strokes
    exist; callers treat that as the signal to use the circular pipeline.
    """
    H, W = image.height, image.width
    if H == 0 or W == 0:
        raise NoAxesFound("empty image")
    ink = dark_mask(image)
    vrun = _longest_run(ink, vertical=True)
    hrun = _longest_run(ink, vertical=False)
    if vrun is None or hrun is None:
        raise NoAxesFound("no dark strokes")
    ycol, ytop, ybot = vrun
    xrow, xleft, xright = hrun
    if ybot - ytop + 1 < MIN_AXIS_FRACTION * H or xright - xleft + 1 < MIN_AXIS_FRACTION * W:
        raise NoAxesFound("no axis-length strokes")
    if abs(ybot - xrow) > 2 or xleft > ycol + 1:
        raise NoAxesFound("strokes do not meet at an origin")
    plot_area = (ycol, ytop, xright, xrow)
    x_axis = (ycol, xrow, xright, xrow)
    y_axis = (ycol, ytop, ycol, xrow)

    glyphs = ink.copy()
    glyphs[ytop : ybot + 1, ycol] = False
    glyphs[xrow, xleft : xright + 1] = False
    ticks: list[Tick] = []
    # y ticks: short horizontal strokes ending just left of the axis column
    if ycol >= 3:
        rows = np.nonzero(ink[ytop : xrow + 1, ycol - 1] & ink[ytop : xrow + 1, ycol - 3])[0] + ytop
        for a, b in _runs(np.isin(np.arange(H), rows)):
            r = (a + b) // 2
            c = ycol - 1
            while c >= 0 and ink[r, c]:
                c -= 1
            glyphs[a : b + 1, c + 1 : ycol] = False
            ticks.append(Tick("y", int(r)))
    # x ticks: short vertical strokes hanging below the axis row
    if xrow + 3 < H:
        cols = np.nonzero(ink[xrow + 1, ycol + 1 : xright + 1] & ink[xrow + 3, ycol + 1 : xright + 1])[0] + ycol + 1
        for a, b in _runs(np.isin(np.arange(W), cols)):
            c = (a + b) // 2
            r = xrow + 1
            while r < H and ink[r, c]:
                r += 1
            glyphs[xrow + 1 : r, a : b + 1] = False
            ticks.append(Tick("x", int(c)))
    blobs = _text_blobs(glyphs)
    for t in ticks:
        if t.axis == "y":
            cands = [bx for bx in blobs if bx[2] < ycol and abs((bx[1] + bx[3]) / 2.0 - t.pixel) <= 4]
            if cands:
                t.label_box = max(cands, key=lambda bx: bx[2])
        else:
            cands = [bx for bx in blobs if xrow < bx[1] <= xrow + 20 and bx[0] - 3 <= t.pixel <= bx[2] + 3]
            if cands:
                t.label_box = min(cands, key=lambda bx: abs((bx[0] + bx[2]) / 2.0 - t.pixel))
        t.confidence = 1.0 if t.label_box is not None else 0.5
    ticks.sort(key=lambda t: (t.axis, t.pixel))

    legend = detect_legend(image, exclude=plot_area)
    bars = _detect_bars(image, plot_area)
    conf = min(1.0, (ybot - ytop + 1) / (0.5 * H)) * min(1.0, (xright - xleft + 1) / (0.5 * W))
    ke = KeyElements(plot_area, x_axis, y_axis, ticks, legend, bars, round(conf, 6))
    ke.overlay = draw_elements(image, ke)
    return ke


def _detect_bars(image: ChartImage, plot_area: Box) -> list[BarRect]:
    x0, top, x1, y0 = plot_area
    crop = image.pixels[top:y0, x0 + 1 : x1 + 1]
    if crop.size == 0:
        return []
    colored = color_mask(ChartImage(crop))
    if not colored.any():
        return []
    codes = crop.astype(np.int64)
    code = (codes[..., 0] << 16) | (codes[..., 1] << 8) | codes[..., 2]
    uniq, counts = np.unique(code[colored], return_counts=True)
    bars = []
    for u, n in zip(uniq, counts):
        if n < 20:
            continue
        m = code == u
        for comp in raster.connected_components(m, connectivity=4):
            l, t, r, b = comp.bbox
            if comp.width < 2 or comp.height < 2 or comp.fill_ratio < 0.95:
                continue
            if b < crop.shape[0] - 2:  # must rest on the baseline
                continue
            color = (int(u >> 16), int((u >> 8) & 255), int(u & 255))
            box = (l + x0 + 1, t + top, r + x0 + 1, b + top)
            bars.append(BarRect(box, color, float(comp.fill_ratio)))
    bars.sort(key=lambda br: (br.box[0], br.box[1]))
    return bars


def draw_elements(image: ChartImage, ke: KeyElements) -> ChartImage:
    """Overlay with the detected boxes outlined."""
    out = image.copy()
    px = out.pixels

    def outline(box, color):
        l, t, r, b = (int(v) for v in box)
        l, r = max(l, 0), min(r, out.width - 1)
        t, b = max(t, 0), min(b, out.height - 1)
        px[t, l : r + 1] = color
        px[b, l : r + 1] = color
        px[t : b + 1, l] = color
        px[t : b + 1, r] = color

    if ke.plot_area:
        outline(ke.plot_area, (0, 200, 0))
    for bar in ke.bars:
        outline(bar.box, AUX_COLOR)
    for e in ke.legend_entries:
        outline(e.swatch_box, (0, 0, 255))
        if e.label_box:
            outline(e.label_box, (0, 0, 255))
    for t in ke.ticks:
        if t.label_box:
            outline(t.label_box, (255, 140, 0))
    return out


# ---------------------------------------------------------------- text


def read_text(image: ChartImage, backend: OcrBackend, region: Box | None = None) -> list[TextItem]:
    items = backend.read(image.to_bytes(), image.width, image.height, region)
    out = []
    for it in items:
        l, t, r, b = it.box
        l = min(max(int(l), 0), image.width - 1)
        r = min(max(int(r), 0), image.width - 1)
        t = min(max(int(t), 0), image.height - 1)
        b = min(max(int(b), 0), image.height - 1)
        out.append(TextItem(it.string, (l, t, r, b), it.confidence, it.role_guess))
    return out


_NUM_RE = re.compile(r"^[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?$")


def parse_number(text: str) -> float | None:
    """Numeric value of a label, or None.

    Accepts thousands separators, scientific notation and a trailing '%',
    which divides by 100.
    """
    s = text.strip().replace("−", "-").replace(" ", "")
    pct = s.endswith("%")
    if pct:
        s = s[:-1]
    if re.fullmatch(r"[+-]?\d{1,3}(,\d{3})+(\.\d*)?([eE][+-]?\d+)?", s):
        s = s.replace(",", "")
    if not _NUM_RE.match(s):
        return None
    v = float(s)
    if not math.isfinite(v):
        return None
    return v / 100.0 if pct else v


def tick_anchors(elements: KeyElements, items: Sequence[TextItem], axis: str = "y") -> list[tuple[float, float]]:
    """Pair ticks on ``axis`` with numeric text items next to them."""
    out = []
    for t in elements.ticks_on(axis):
        best = None
        for it in items:
            v = parse_number(it.string)
            if v is None:
                continue
            l, top, r, b = it.box
            if axis == "y":
                if elements.plot_area and r >= elements.plot_area[0]:
                    continue
                d = abs((top + b) / 2.0 - t.pixel)
                if d > 4:
                    continue
                key = (d, -r)
            else:
                d = abs((l + r) / 2.0 - t.pixel)
                if elements.plot_area and top <= elements.plot_area[3]:
                    continue
                if d > 6:
                    continue
                key = (d, top)
            if best is None or key < best[0]:
                best = (key, v)
        if best is not None:
            out.append((float(t.pixel), best[1]))
    return out


# ---------------------------------------------------------------- calibration


def calibrate_axis(ticks: Sequence[tuple[float, float]], axis: str = "y") -> Calibration:
    """Least-squares map value = alpha * pixel + beta through tick anchors."""
    if len(ticks) < 2:
        raise InsufficientAnchors(f"need at least 2 anchors, got {len(ticks)}")
    p = np.array([float(t[0]) for t in ticks])
    v = np.array([float(t[1]) for t in ticks])
    pm = p.mean()
    vm = v.mean()
    dp = p - pm
    sxx = float(dp @ dp)
    if sxx == 0.0:
        raise DegenerateAnchors("all anchors share one pixel position")
    alpha = float(dp @ (v - vm)) / sxx
    if alpha == 0.0 or not math.isfinite(alpha):
        raise DegenerateAnchors("anchors carry no value change")
    beta = float(vm - alpha * pm)
    resid = v - (alpha * p + beta)
    rms = float(math.sqrt(float(resid @ resid) / len(p)))
    return Calibration(alpha, beta, axis, rms, len(p))


# ---------------------------------------------------------------- curves


def _series_mask(image: ChartImage, series_color, plot_area: Box) -> tuple[np.ndarray, int, int]:
    x0, top, x1, y0 = plot_area
    crop = image.pixels[top:y0, x0 + 1 : x1 + 1]
    hsv = raster.rgb_to_hsv_array(crop)
    hc, sc, vc = raster.rgb_to_hsv(series_color)
    dh = np.abs((hsv[..., 0] - hc + 180.0) % 360.0 - 180.0)
    mask = (dh <= 8.0) & (hsv[..., 1] >= 0.6 * sc) & (hsv[..., 2] >= vc - 0.1) & (hsv[..., 2] <= vc + 0.35)
    if sc < COLOR_S_MIN:
        diff = np.abs(crop.astype(np.int64) - np.asarray(series_color)).max(axis=2)
        mask = diff <= 24
    return mask, x0 + 1, top


def _drop_fragments(skel: np.ndarray, min_size: int = 5) -> np.ndarray:
    labels, n = ndimage.label(skel, structure=np.ones((3, 3), bool))
    if n <= 1:
        return skel
    sizes = ndimage.sum_labels(skel, labels, index=np.arange(1, n + 1))
    keep = np.concatenate([[False], sizes >= min_size])
    if not keep.any():
        return skel
    return keep[labels]


def _tls_line(xs: np.ndarray, ys: np.ndarray) -> tuple[float, float, int] | None:
    """Total-least-squares line y = a*x + b with one round of outlier rejection.

    Fitting the principal axis of the stroke pixels is orientation-free, so
    steep segments are not biased the way column medians are.
    """
    sel = np.ones(len(xs), dtype=bool)
    a = b = 0.0
    for _ in range(3):
        if sel.sum() < 3:
            return None
        mx, my = xs[sel].mean(), ys[sel].mean()
        cov = np.cov(np.stack([xs[sel] - mx, ys[sel] - my]))
        w, v = np.linalg.eigh(cov)
        dx, dy = v[:, -1]
        if abs(dx) < 1e-9:
            return None
        a = dy / dx
        b = my - a * mx
        perp = np.abs(a * xs - ys + b) / math.hypot(a, 1.0)
        new = perp <= 2.5
        if new.sum() < 3 or np.array_equal(new, sel):
            break
        sel = new
    return float(a), float(b), int(sel.sum())


def _fit_polyline(
    mask_xy: tuple[np.ndarray, np.ndarray],
    anchors: Sequence[float],
    margin: float = 4.0,
):
    """Piecewise-linear curve through ``anchors`` fitted to the stroke mask.

    Each segment between neighbouring anchors gets its own line from the
    pixels away from both vertices; a vertex is where its two segment lines
    meet it. This recovers apexes that thinning shortens and bridges gaps
    left where another series is drawn on top.
    """
    xs, ys = mask_xy
    anchors = sorted(a for a in anchors if xs.min() - 3 <= a <= xs.max() + 3)
    if len(anchors) < 2:
        return None
    lines = []
    for a, b in zip(anchors, anchors[1:]):
        sel = (xs >= a + margin) & (xs <= b - margin)
        lines.append(_tls_line(xs[sel], ys[sel]) if sel.sum() >= 3 else None)
    vy: list[float | None] = []
    for j, a in enumerate(anchors):
        cands = []
        for ln in (lines[j - 1] if j > 0 else None, lines[j] if j < len(lines) else None):
            if ln is not None:
                cands.append((ln[2], ln[0] * a + ln[1]))
        if not cands:
            vy.append(None)
        elif len(cands) == 2 and abs(cands[0][1] - cands[1][1]) <= 2.0:
            vy.append((cands[0][1] + cands[1][1]) / 2.0)
        else:
            vy.append(max(cands)[1])
    known = [(a, y) for a, y in zip(anchors, vy) if y is not None]
    if len(known) < 2:
        return None
    kx = np.array([k[0] for k in known])
    ky = np.array([k[1] for k in known])
    grid = np.arange(math.ceil(kx[0]), math.floor(kx[-1]) + 1, dtype=np.float64)
    return [(float(x), float(y)) for x, y in zip(grid, np.interp(grid, kx, ky))]


def _window_sums(xs: np.ndarray, ys: np.ndarray, ncols: int) -> np.ndarray:
    """Cumulative per-column moments (n, x, y, xx, yy, xy) of stroke pixels."""
    xi = xs.astype(np.int64)
    mom = np.stack([np.bincount(xi, weights=w, minlength=ncols) for w in (np.ones_like(xs), xs, ys, xs * xs, ys * ys, xs * ys)])
    return np.concatenate([np.zeros((6, 1)), np.cumsum(mom, axis=1)], axis=1)


def _refine_columns(mask: np.ndarray, cols: np.ndarray, rough: np.ndarray, half: int = 6) -> np.ndarray:
    """Per-column curve row from the best of three local line fits.

    Each column gets a least-squares line y = a*x + b from a left-sided, a
    right-sided and a centred window of stroke pixels. Whole columns enter
    each window, so every column's pixels centre on the stroke and the fit
    is unbiased on straight runs. The window with the smallest residual
    spread across the stroke wins. Near a sharp vertex one of the one-sided
    windows sees a single straight arm, which restores the apex that
    thinning erodes.
    """
    my, mx = np.nonzero(mask)
    if len(mx) == 0:
        return rough
    cum = _window_sums(mx.astype(np.float64), my.astype(np.float64), mask.shape[1])
    out = rough.astype(np.float64).copy()
    last = mask.shape[1] - 1
    for i, c in enumerate(cols.astype(np.int64)):
        best = None
        for lo, hi in ((c - half, c), (c, c + half), (c - half // 2, c + half // 2)):
            lo, hi = max(lo, 0), min(hi, last)
            n, sx, sy, sxx, syy, sxy = cum[:, hi + 1] - cum[:, lo]
            if n < 4:
                continue
            mxw, myw = sx / n, sy / n
            cxx, cyy, cxy = sxx / n - mxw * mxw, syy / n - myw * myw, sxy / n - mxw * myw
            if cxx < 0.5:
                continue
            slope = cxy / cxx
            resid = max(cyy - slope * cxy, 0.0) / (1.0 + slope * slope)
            y = myw + slope * (c - mxw)
            if abs(y - rough[i]) > 2 * half:
                continue
            if best is None or resid < best[0]:
                best = (resid, y)
        if best is not None:
            out[i] = best[1]
    return out


def _snap_vertices(cols: np.ndarray, ys: np.ndarray, half: int = 6, bend: float = 1.0) -> np.ndarray:
    """Rebuild sharp corners as the meeting point of the two straight arms.

    Columns whose second difference exceeds ``bend`` px mark a corner. The
    arms on either side, fitted away from the corner, are intersected and
    the columns around the corner are redrawn from whichever arm they lie on.
    """
    out = ys.copy()
    n = len(cols)
    if n < 2 * half + 6:
        return out
    d2 = np.zeros(n)
    contiguous = (cols[2:] - cols[:-2]) == 2
    d2[1:-1] = np.where(contiguous, ys[2:] - 2 * ys[1:-1] + ys[:-2], 0.0)
    flagged = np.nonzero(np.abs(d2) > bend)[0]
    groups: list[list[int]] = []
    for i in flagged:
        if groups and i - groups[-1][1] <= 3:
            groups[-1][1] = i
        else:
            groups.append([i, i])
    for s, e in groups:
        left = np.arange(s - 2 - half, s - 1)
        right = np.arange(e + 2, e + 3 + half)
        if left[0] < 0 or right[-1] >= n:
            continue
        if cols[left[-1]] - cols[left[0]] != len(left) - 1 or cols[right[-1]] - cols[right[0]] != len(right) - 1:
            continue
        al, bl = np.polyfit(cols[left], ys[left], 1)
        ar, br = np.polyfit(cols[right], ys[right], 1)
        if abs(al - ar) < 1e-9:
            continue
        xv = (br - bl) / (al - ar)
        if not cols[s] - 3 <= xv <= cols[e] + 3:
            continue
        for i in range(s - 2, e + 3):
            x = cols[i]
            out[i] = al * x + bl if x <= xv else ar * x + br
    return out


def extract_curve_skeleton(
    image: ChartImage,
    series_color,
    plot_area: Box,
    anchors_x: Sequence[float] | None = None,
) -> CurveSkeleton:
    """Threshold one series' colour, thin it, then take one row per column.

    The skeleton's median row seeds each column and local line fits over
    the stroke refine it, with sharp corners rebuilt from their arms. With ``anchors_x`` (the category tick positions) the curve is instead
    modelled as straight segments between anchors, fitted to the mask.
    """
    mask, ox, oy = _series_mask(image, series_color, plot_area)
    if not mask.any():
        raise SeriesNotFound(f"no pixels of colour {tuple(series_color)} in the plot area")
    skel = _drop_fragments(raster.skeletonize(mask).bits)
    stroke = _drop_fragments(mask, min_size=10)
    if not skel.any() or not stroke.any():
        raise SeriesNotFound(f"colour {tuple(series_color)} leaves no stroke in the plot area")
    # thinning can shorten a stroke's tips, so every stroke column gets a row:
    # the skeleton median where thinning kept pixels, the stroke median elsewhere
    rough = {}
    for src in (stroke, skel):
        ys, xs = np.nonzero(src)
        order = np.argsort(xs, kind="stable")
        xs, ys = xs[order], ys[order]
        cols, starts = np.unique(xs, return_index=True)
        bounds = list(starts[1:]) + [len(xs)]
        rough.update((int(c), float(np.median(ys[a:b]))) for c, a, b in zip(cols, starts, bounds))
    cols = np.array(sorted(rough), dtype=np.int64)
    guess = np.array([rough[c] for c in cols], dtype=np.float64)
    refined = _snap_vertices(cols.astype(np.float64), _refine_columns(stroke, cols, guess))
    points = [(float(c + ox), float(y) + oy) for c, y in zip(cols, refined)]
    if anchors_x is not None:
        my, mx = np.nonzero(mask)
        fitted = _fit_polyline((mx.astype(np.float64) + ox, my.astype(np.float64) + oy), anchors_x)
        if fitted is not None:
            points = fitted
    full = np.zeros((image.height, image.width), dtype=bool)
    full[oy : oy + mask.shape[0], ox : ox + mask.shape[1]] = mask
    return CurveSkeleton(tuple(int(c) for c in series_color), points, "skeleton", full)


def extract_markers(image: ChartImage, series_color, plot_area: Box, min_size: int = 8) -> CurveSkeleton:
    """Scatter markers as centroid points, ordered by x."""
    mask, ox, oy = _series_mask(image, series_color, plot_area)
    comps = [c for c in raster.connected_components(mask) if c.size >= min_size]
    if not comps:
        raise SeriesNotFound(f"no markers of colour {tuple(series_color)}")
    pts = sorted((cx + ox, cy + oy) for cx, cy in (c.centroid() for c in comps))
    full = np.zeros((image.height, image.width), dtype=bool)
    full[oy : oy + mask.shape[0], ox : ox + mask.shape[1]] = mask
    return CurveSkeleton(tuple(int(c) for c in series_color), [(float(x), float(y)) for x, y in pts], "markers", full)


# ---------------------------------------------------------------- auxiliary lines


def _aux_overlay(image: ChartImage | None, x: float, y: float, axis_x: float, base_y: float) -> ChartImage | None:
    if image is None:
        return None
    out = image.copy()
    px = out.pixels
    xi, yi = int(round(x)), int(round(y))
    ax = int(round(axis_x))
    by = int(round(base_y))
    if not (0 <= yi < out.height and 0 <= xi < out.width):
        return out
    lo, hi = sorted((ax, xi))
    cols = np.arange(max(lo, 0), min(hi, out.width - 1) + 1)
    px[yi, cols[(cols - lo) % 4 < 2]] = AUX_COLOR
    lo, hi = sorted((yi, by))
    rows = np.arange(max(lo, 0), min(hi, out.height - 1) + 1)
    px[rows[(rows - lo) % 4 < 2], xi] = AUX_COLOR
    return out


def read_via_auxline(
    source: CurveSkeleton | KeyElements,
    calibration: Calibration,
    target: float | int,
    *,
    image: ChartImage | None = None,
    tick_step: float | None = None,
) -> NumericReading:
    """Project an auxiliary line from ``target`` and read the crossing value.

    For a curve ``target`` is an x pixel and the crossing row is linearly
    interpolated between skeleton points. For key elements ``target`` is a
    bar index (int) or an x pixel inside a bar (float), and the crossing is
    the bar's top edge.
    """
    if isinstance(source, CurveSkeleton):
        if not source.points:
            raise NoIntersection("empty curve")
        x = float(target)
        y = source.y_at(x)
        axis_x = x
        base_y = y
        if source.points:
            axis_x = min(p[0] for p in source.points)
    else:
        if not source.bars:
            raise NoIntersection("no bars detected")
        if isinstance(target, (int, np.integer)) and not isinstance(target, bool):
            if not 0 <= int(target) < len(source.bars):
                raise NoIntersection(f"bar index {target} out of range")
            bar = source.bars[int(target)]
        else:
            hits = [b for b in source.bars if b.box[0] - 0.5 <= float(target) <= b.box[2] + 0.5]
            if not hits:
                raise NoIntersection(f"no bar at x={target}")
            bar = min(hits, key=lambda b: abs(b.center_x - float(target)))
        x = bar.center_x
        y = float(bar.box[1])
        axis_x = float(source.plot_area[0]) if source.plot_area else 0.0
        base_y = float(source.plot_area[3]) if source.plot_area else float(bar.box[3] + 1)
    value = calibration.value_at(y)
    units = value / tick_step if tick_step else None
    return NumericReading(value, y, float(x), _aux_overlay(image, x, y, axis_x, base_y), units)


# ---------------------------------------------------------------- sectors


def _circle_region(image: ChartImage) -> tuple[np.ndarray, float, float, float]:
    nonwhite = image.pixels.min(axis=2) < WHITE_MIN
    nonwhite &= ~dark_mask(image)
    labels, n = ndimage.label(nonwhite, structure=np.ones((3, 3), bool))
    if n == 0:
        raise NoCircularRegion("image has no coloured region")
    sizes = ndimage.sum_labels(nonwhite, labels, index=np.arange(1, n + 1))
    best = int(np.argmax(sizes)) + 1
    region = labels == best
    sl = ndimage.find_objects(labels)[best - 1]
    h = sl[0].stop - sl[0].start
    w = sl[1].stop - sl[1].start
    if min(h, w) < 20 or abs(h - w) > 0.1 * max(h, w):
        raise NoCircularRegion(f"largest region {w}x{h} is not round")
    cx = (sl[1].start + sl[1].stop - 1) / 2.0
    cy = (sl[0].start + sl[0].stop - 1) / 2.0
    r = (w + h) / 4.0
    if sizes[best - 1] < 0.25 * math.pi * r * r:
        raise NoCircularRegion("region too sparse for a disk or ring")
    return region, cx, cy, r


def _inner_radius(region: np.ndarray, cx: float, cy: float, r: float) -> float:
    """First radius at which the ring occupancy reaches one half."""
    ys, xs = np.mgrid[0 : region.shape[0], 0 : region.shape[1]]
    rr = np.hypot(xs - cx, ys - cy)
    bins = np.floor(rr).astype(np.int64)
    inside = bins <= int(r)
    total = np.bincount(bins[inside], minlength=int(r) + 1)
    filled = np.bincount(bins[inside], weights=region[inside].astype(np.float64), minlength=int(r) + 1)
    occ = filled / np.maximum(total, 1)
    for i, o in enumerate(occ):
        if o >= 0.5:
            return float(i)
    return 0.0


def _elbow_k(colors: np.ndarray, rng_seed: int, k_lo: int = 2, k_hi: int = 8) -> int:
    n_unique = len(raster.unique_colors(colors)[0])
    top = min(k_hi + 1, n_unique)
    if top < k_lo + 1:
        return max(1, min(n_unique, k_lo))
    inertia = {}
    for k in range(1, top + 1):
        inertia[k] = raster.kmeans_fit(colors, k, rng_seed).inertia
    best_k, best_d2 = None, -np.inf
    for k in range(k_lo, min(k_hi, top - 1) + 1):
        d2 = inertia[k - 1] - 2 * inertia[k] + inertia[k + 1]
        if d2 > best_d2:
            best_k, best_d2 = k, d2
    if best_k is None:
        raise KSelectionFailed("not enough distinct colours for an elbow scan")
    return best_k


def _palette_k(colors: np.ndarray, min_share: float = 0.01, coverage: float = 0.9) -> int | None:
    """Number of dominant exact colours when a few of them cover the region."""
    _, _, counts = raster.unique_colors(colors)
    share = counts / counts.sum()
    major = share >= min_share
    if 1 <= major.sum() <= 8 and share[major].sum() >= coverage:
        return int(major.sum())
    return None


def segment_sectors_full(
    image: ChartImage,
    chart_type: str,
    rng_seed: int = 0,
    k: int | None = None,
    legend: Sequence[LegendEntry] | None = None,
) -> SectorSegmentation:
    if chart_type not in ("pie", "donut"):
        raise ValueError(f"segment_sectors needs a pie or donut, got {chart_type!r}")
    region, cx, cy, r = _circle_region(image)
    r_in = _inner_radius(region, cx, cy, r) if chart_type == "donut" else 0.0
    ys, xs = np.mgrid[0 : image.height, 0 : image.width]
    rr = np.hypot(xs - cx, ys - cy)
    mask = region & (rr <= r)
    if r_in > 0:
        mask &= rr >= r_in
    mask = raster.erode(mask, 1).bits
    if not mask.any():
        raise NoCircularRegion("region vanished after erosion")
    colors = image.pixels[mask]
    if legend is None:
        legend = detect_legend(image)
    source = "given"
    if k is None:
        if legend:
            k, source = len(legend), "legend"
        else:
            pk = _palette_k(colors)
            if pk is not None:
                k, source = pk, "palette"
            else:
                k, source = _elbow_k(colors, rng_seed), "elbow"
    n_unique = len(raster.unique_colors(colors)[0])
    k = min(k, n_unique)
    init = None
    if source == "legend" and k == len(legend) and k <= n_unique:
        init = np.array([e.color for e in legend], dtype=np.float64)
    try:
        result = raster.kmeans_fit(colors, k, rng_seed, init=init)
    except raster.KTooLarge as exc:
        raise KSelectionFailed(str(exc)) from exc
    keep = [i for i, c in enumerate(result.clusters) if c.share >= 0.01]
    total = sum(result.clusters[i].pixel_count for i in keep)
    label_img = np.full(mask.shape, -1, dtype=np.int64)
    label_img[mask] = result.labels
    estimates = []
    for i in keep:
        c = result.clusters[i]
        share = c.pixel_count / total
        cluster = ColorCluster(c.centroid, c.pixel_count, share)
        _, n_comp = ndimage.label(label_img == i, structure=np.ones((3, 3), bool))
        estimates.append(SectorEstimate(cluster, int(n_comp), share, 360.0 * share))
    return SectorSegmentation(estimates, (cx, cy), r, r_in, k, source, mask)


def segment_sectors(image: ChartImage, chart_type: str, rng_seed: int = 0, k: int | None = None) -> list[SectorEstimate]:
    """Segment, cluster and quantify a pie or donut into per-colour shares."""
    return segment_sectors_full(image, chart_type, rng_seed, k).estimates


# ---------------------------------------------------------------- legend matching


def match_colors_to_legend(
    legend: Sequence[tuple[str, Sequence[float]]],
    regions: Sequence[Sequence[float]],
) -> LegendMatch:
    """Minimum-total-distance assignment of legend colours to region colours.

    Returns the best partial assignment when the counts differ and flags it.
    """
    if not legend:
        raise LegendNotFound("no legend entries to match")
    if not regions:
        raise SeriesNotFound("no regions to match against")
    lc = np.array([c for _, c in legend], dtype=np.float64)
    rc = np.array(regions, dtype=np.float64)
    cost = np.linalg.norm(lc[:, None, :] - rc[None, :, :], axis=2)
    rows, cols = linear_sum_assignment(cost)
    mapping = {}
    dist = {}
    for i, j in sorted(zip(rows.tolist(), cols.tolist())):
        label = legend[i][0]
        mapping[label] = int(j)
        dist[label] = float(cost[i, j])
    return LegendMatch(mapping, dist, len(legend) != len(regions))
