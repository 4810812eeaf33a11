"""Low-level image primitives shared by the perception tools."""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from chartlens.image import ChartImage

KMEANS_MAX_ITER = 100
KMEANS_TOL = 1e-6


class KTooLarge(ValueError):
    """More clusters requested than the sample can populate."""


@dataclass(eq=False)
class BinaryMask:
    bits: np.ndarray

    def __post_init__(self) -> None:
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.ndim != 2:
            raise ValueError("mask must be two-dimensional")

    @property
    def width(self) -> int:
        return int(self.bits.shape[1])

    @property
    def height(self) -> int:
        return int(self.bits.shape[0])

    @classmethod
    def empty(cls, width: int, height: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=bool))

    def count(self) -> int:
        return int(self.bits.sum())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return bool(np.array_equal(self.bits, other.bits))


@dataclass
class Component:
    """One connected blob: ``pixels`` holds (row, col) pairs, bbox is inclusive."""

    pixels: np.ndarray
    bbox: tuple[int, int, int, int]  # left, top, right, bottom

    @property
    def size(self) -> int:
        return int(len(self.pixels))

    @property
    def width(self) -> int:
        return self.bbox[2] - self.bbox[0] + 1

    @property
    def height(self) -> int:
        return self.bbox[3] - self.bbox[1] + 1

    @property
    def fill_ratio(self) -> float:
        return self.size / float(self.width * self.height)

    def centroid(self) -> tuple[float, float]:
        """(x, y) mean of member pixels."""
        return float(self.pixels[:, 1].mean()), float(self.pixels[:, 0].mean())


@dataclass
class ColorCluster:
    centroid: tuple[float, float, float]
    pixel_count: int
    share: float


@dataclass
class KMeansResult:
    clusters: list[ColorCluster]
    inertia: float
    inertia_history: list[float] = field(default_factory=list)
    iterations: int = 0
    labels: np.ndarray | None = None  # per input pixel, indexes ``clusters``


def rgb_to_hsv(pixel) -> tuple[float, float, float]:
    """Hexcone conversion: H in degrees [0, 360), S and V in [0, 1]."""
    r, g, b = (float(c) / 255.0 for c in pixel)
    h, s, v = colorsys.rgb_to_hsv(r, g, b)
    return (h * 360.0) % 360.0, s, v


def rgb_to_hsv_array(pixels: np.ndarray) -> np.ndarray:
    """Vectorised :func:`rgb_to_hsv` over an ``(..., 3)`` array."""
    rgb = np.asarray(pixels, dtype=np.float64) / 255.0
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    delta = maxc - minc
    v = maxc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    safe = np.where(delta > 0, delta, 1.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(r == maxc, bc - gc, np.where(g == maxc, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0) * 360.0
    h = np.where(h >= 360.0, h - 360.0, h)
    return np.stack([h, s, v], axis=-1)


def threshold_hsv(
    image: ChartImage,
    h_range: tuple[float, float] = (0.0, 360.0),
    s_min: float = 0.0,
    v_min: float = 0.0,
    s_max: float = 1.0,
    v_max: float = 1.0,
) -> BinaryMask:
    """Mask of pixels whose HSV falls inside every range.

    ``h_range`` is inclusive and wraps through 0 when ``lo > hi``.
    """
    hsv = rgb_to_hsv_array(image.pixels)
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    lo, hi = h_range
    if lo <= hi:
        hue_ok = (h >= lo) & (h <= hi)
    else:
        hue_ok = (h >= lo) | (h <= hi)
    return BinaryMask(hue_ok & (s >= s_min) & (s <= s_max) & (v >= v_min) & (v <= v_max))


_STRUCT = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


def connected_components(mask: BinaryMask | np.ndarray, connectivity: int = 8) -> list[Component]:
    """Components ordered by the (top, left) corner of their bounding box."""
    if connectivity not in _STRUCT:
        raise ValueError("connectivity must be 4 or 8")
    bits = mask.bits if isinstance(mask, BinaryMask) else np.asarray(mask, dtype=bool)
    labels, n = ndimage.label(bits, structure=_STRUCT[connectivity])
    if n == 0:
        return []
    rows, cols = np.nonzero(labels)
    lab = labels[rows, cols]
    order = np.argsort(lab, kind="stable")
    rows, cols, lab = rows[order], cols[order], lab[order]
    bounds = np.searchsorted(lab, np.arange(1, n + 2))
    comps = []
    for i in range(n):
        r = rows[bounds[i] : bounds[i + 1]]
        c = cols[bounds[i] : bounds[i + 1]]
        pix = np.stack([r, c], axis=1)
        comps.append(Component(pix, (int(c.min()), int(r.min()), int(c.max()), int(r.max()))))
    comps.sort(key=lambda comp: (comp.bbox[1], comp.bbox[0]))
    return comps


def erode(mask: BinaryMask | np.ndarray, iterations: int = 1) -> BinaryMask:
    bits = mask.bits if isinstance(mask, BinaryMask) else np.asarray(mask, dtype=bool)
    if iterations <= 0:
        return BinaryMask(bits.copy())
    return BinaryMask(ndimage.binary_erosion(bits, structure=_STRUCT[8], iterations=iterations))


def _zs_pass(img: np.ndarray, first: bool) -> np.ndarray:
    """Pixels removable in one Zhang-Suen sub-iteration (img is zero padded)."""
    p2 = img[:-2, 1:-1]
    p3 = img[:-2, 2:]
    p4 = img[1:-1, 2:]
    p5 = img[2:, 2:]
    p6 = img[2:, 1:-1]
    p7 = img[2:, :-2]
    p8 = img[1:-1, :-2]
    p9 = img[:-2, :-2]
    centre = img[1:-1, 1:-1]
    ring = (p2, p3, p4, p5, p6, p7, p8, p9, p2)
    b = p2 + p3 + p4 + p5 + p6 + p7 + p8 + p9
    a = sum(((ring[i] == 0) & (ring[i + 1] == 1)).astype(np.uint8) for i in range(8))
    if first:
        c1 = (p2 * p4 * p6) == 0
        c2 = (p4 * p6 * p8) == 0
    else:
        c1 = (p2 * p4 * p8) == 0
        c2 = (p2 * p6 * p8) == 0
    return (centre == 1) & (b >= 2) & (b <= 6) & (a == 1) & c1 & c2


def _zs_removable_at(img: np.ndarray, r: int, c: int, first: bool) -> bool:
    """Zhang-Suen deletion test for one pixel of the padded image."""
    p2, p3, p4 = img[r - 1, c], img[r - 1, c + 1], img[r, c + 1]
    p5, p6, p7 = img[r + 1, c + 1], img[r + 1, c], img[r + 1, c - 1]
    p8, p9 = img[r, c - 1], img[r - 1, c - 1]
    ring = (p2, p3, p4, p5, p6, p7, p8, p9, p2)
    b = p2 + p3 + p4 + p5 + p6 + p7 + p8 + p9
    if not 2 <= b <= 6:
        return False
    if sum(1 for i in range(8) if ring[i] == 0 and ring[i + 1] == 1) != 1:
        return False
    if first:
        return p2 * p4 * p6 == 0 and p4 * p6 * p8 == 0
    return p2 * p4 * p8 == 0 and p2 * p6 * p8 == 0


def skeletonize(mask: BinaryMask | np.ndarray) -> BinaryMask:
    """Zhang-Suen thinning with connectivity-safe deletion.

    Each sub-iteration finds the Zhang-Suen candidates in parallel, then
    deletes them in raster order, re-testing every candidate against the
    pixels already deleted. Purely parallel deletion wipes out two-pixel
    diagonal staircases, which would split thick diagonal strokes.
    """
    bits = mask.bits if isinstance(mask, BinaryMask) else np.asarray(mask, dtype=bool)
    img = np.pad(bits, 1).astype(np.uint8)
    while True:
        changed = False
        for first in (True, False):
            cand = _zs_pass(img, first)
            if not cand.any():
                continue
            for r, c in zip(*np.nonzero(cand)):
                if _zs_removable_at(img, r + 1, c + 1, first):
                    img[r + 1, c + 1] = 0
                    changed = True
        if not changed:
            break
    return BinaryMask(img[1:-1, 1:-1].astype(bool))


def _feature_space(colors: np.ndarray, space: str) -> np.ndarray:
    if space == "rgb":
        return colors.astype(np.float64)
    if space == "hsv":
        hsv = rgb_to_hsv_array(colors)
        ang = np.deg2rad(hsv[:, 0])
        s, v = hsv[:, 1], hsv[:, 2]
        return np.stack([s * np.cos(ang), s * np.sin(ang), v], axis=1) * 255.0
    raise ValueError(f"unknown colour space {space!r}")


def unique_colors(pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Distinct RGB rows in lexicographic order, plus inverse index and counts."""
    pix = np.asarray(pixels).reshape(-1, 3).astype(np.int64)
    code = (pix[:, 0] << 16) | (pix[:, 1] << 8) | pix[:, 2]
    ucode, inverse, counts = np.unique(code, return_inverse=True, return_counts=True)
    uniq = np.stack([ucode >> 16, (ucode >> 8) & 255, ucode & 255], axis=1).astype(np.uint8)
    return uniq, inverse.reshape(-1), counts


def _kmeanspp(feats: np.ndarray, w: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centres_idx = [int(rng.choice(len(feats), p=w / w.sum()))]
    d2 = ((feats - feats[centres_idx[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        weights = w * d2
        total = weights.sum()
        if total <= 0:
            raise KTooLarge("cannot seed further distinct centres")
        nxt = int(rng.choice(len(feats), p=weights / total))
        centres_idx.append(nxt)
        d2 = np.minimum(d2, ((feats - feats[nxt]) ** 2).sum(axis=1))
    return feats[centres_idx].copy()


def kmeans_fit(
    pixels: np.ndarray,
    k: int,
    rng_seed: int = 0,
    space: str = "rgb",
    max_iter: int = KMEANS_MAX_ITER,
    tol: float = KMEANS_TOL,
    init: np.ndarray | None = None,
) -> KMeansResult:
    """Weighted k-means over the distinct colours of ``pixels``.

    Clustering distinct colours weighted by multiplicity is identical to
    clustering every pixel but far cheaper on flat-coloured charts. Seeding
    is k-means++ driven by ``rng_seed`` unless ``init`` supplies k starting
    RGB centroids; assignment ties go to the lowest cluster index.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    pix = np.asarray(pixels).reshape(-1, 3)
    if len(pix) == 0:
        raise ValueError("empty pixel sample")
    uniq, inverse, counts = unique_colors(pix)
    if k > len(uniq):
        raise KTooLarge(f"k={k} exceeds {len(uniq)} distinct colours")
    feats = _feature_space(uniq, space)
    w = counts.astype(np.float64)
    if init is not None:
        start = np.asarray(init, dtype=np.float64).reshape(-1, 3)
        if len(start) != k:
            raise ValueError(f"init has {len(start)} centroids for k={k}")
        centres = _feature_space(np.clip(np.rint(start), 0, 255).astype(np.uint8), space)
    else:
        centres = _kmeanspp(feats, w, k, np.random.default_rng(rng_seed))

    history: list[float] = []
    assign = np.zeros(len(uniq), dtype=np.int64)
    iterations = 0
    for iterations in range(1, max_iter + 1):
        dist = ((feats[:, None, :] - centres[None, :, :]) ** 2).sum(axis=2)
        assign = dist.argmin(axis=1)
        history.append(float((w * dist[np.arange(len(uniq)), assign]).sum()))
        new = centres.copy()
        for j in range(k):
            members = assign == j
            if members.any():
                new[j] = (feats[members] * w[members, None]).sum(axis=0) / w[members].sum()
            else:
                # re-seed an empty cluster at the worst-served colour
                cost = w * dist[np.arange(len(uniq)), assign]
                taken = {tuple(c) for c in new}
                for cand in np.argsort(-cost, kind="stable"):
                    if cost[cand] > 0 and tuple(feats[cand]) not in taken:
                        new[j] = feats[cand]
                        break
                else:
                    raise KTooLarge("empty cluster cannot be re-seeded")
        shift = float(np.sqrt(((new - centres) ** 2).sum(axis=1)).max())
        centres = new
        if shift <= tol:
            break

    dist = ((feats[:, None, :] - centres[None, :, :]) ** 2).sum(axis=2)
    assign = dist.argmin(axis=1)
    inertia = float((w * dist[np.arange(len(uniq)), assign]).sum())
    if not history or inertia < history[-1]:
        history.append(inertia)

    total = w.sum()
    raw = []
    for j in range(k):
        members = assign == j
        cnt = float(w[members].sum())
        if cnt > 0:
            rgb = (uniq[members].astype(np.float64) * w[members, None]).sum(axis=0) / cnt
        else:
            rgb = np.zeros(3)
        raw.append((j, ColorCluster(tuple(float(c) for c in rgb), int(cnt), float(cnt / total))))
    raw.sort(key=lambda t: (-t[1].share, t[1].centroid))
    remap = np.empty(k, dtype=np.int64)
    for new_idx, (old_idx, _) in enumerate(raw):
        remap[old_idx] = new_idx
    labels = remap[assign][inverse]
    return KMeansResult(
        clusters=[c for _, c in raw],
        inertia=inertia,
        inertia_history=history,
        iterations=iterations,
        labels=labels,
    )


def kmeans_colors(pixels: np.ndarray, k: int, rng_seed: int = 0, space: str = "rgb") -> list[ColorCluster]:
    """Dominant colour clusters sorted by descending share."""
    return kmeans_fit(pixels, k, rng_seed, space).clusters


def drop_minor_clusters(clusters: list[ColorCluster], min_share: float = 0.01) -> list[ColorCluster]:
    """Discard clusters below ``min_share`` and renormalise the rest."""
    kept = [c for c in clusters if c.share >= min_share]
    if not kept:
        return []
    total = sum(c.pixel_count for c in kept)
    return [ColorCluster(c.centroid, c.pixel_count, float(c.pixel_count / total)) for c in kept]
