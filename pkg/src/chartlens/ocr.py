"""OCR backends behind one small interface.

``TemplateOcr`` is the default: it reads the bitmap by exact matching
against the embedded 5x7 font, so it works on any image the renderer
produced without a sidecar file. ``GroundTruthOcr`` replays the renderer's
text items from a sidecar, optionally corrupted with seeded noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy import ndimage

from chartlens import font
from chartlens.image import ChartImage


class BackendUnavailable(RuntimeError):
    pass


@dataclass
class TextItem:
    string: str
    box: tuple[int, int, int, int]  # left, top, right, bottom (inclusive)
    confidence: float = 1.0
    role_guess: str = "unknown"

    def center(self) -> tuple[float, float]:
        l, t, r, b = self.box
        return (l + r) / 2.0, (t + b) / 2.0

    def to_dict(self) -> dict:
        return {
            "string": self.string,
            "box": list(self.box),
            "confidence": self.confidence,
            "role_guess": self.role_guess,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TextItem":
        return cls(d["string"], tuple(d["box"]), d.get("confidence", 1.0), d.get("role_guess", "unknown"))


Box = tuple[int, int, int, int]


class OcrBackend(Protocol):
    name: str

    def read(self, image_bytes: bytes, width: int, height: int, region: Box | None = None) -> list[TextItem]:
        ...


def _intersects(a: Box, b: Box) -> bool:
    return not (a[2] < b[0] or b[2] < a[0] or a[3] < b[1] or b[3] < a[1])


class GroundTruthOcr:
    """Returns the renderer's text items, optionally degraded.

    ``p_drop`` removes each character independently; ``sigma_px`` adds
    Gaussian jitter to every box coordinate. Noise is seeded so repeated
    reads of the same image are identical.
    """

    name = "stub"

    def __init__(
        self,
        items: list[TextItem] | None = None,
        sidecar: str | Path | None = None,
        p_drop: float = 0.0,
        sigma_px: float = 0.0,
        seed: int = 0,
    ) -> None:
        self._items = items
        self._sidecar = Path(sidecar) if sidecar is not None else None
        self.p_drop = p_drop
        self.sigma_px = sigma_px
        self.seed = seed

    @classmethod
    def from_ground_truth(cls, gt, **noise) -> "GroundTruthOcr":
        items = [TextItem(t.text, tuple(t.box), 1.0, t.role) for t in gt.text_items]
        return cls(items=items, **noise)

    def _load(self) -> list[TextItem]:
        if self._items is not None:
            return self._items
        if self._sidecar is None:
            raise BackendUnavailable("stub OCR has neither items nor a sidecar file")
        try:
            data = json.loads(self._sidecar.read_text(encoding="utf-8"))
            raw = data["ground_truth"]["text_items"]
        except (OSError, ValueError, KeyError) as exc:
            raise BackendUnavailable(f"cannot read OCR sidecar {self._sidecar}: {exc}") from exc
        self._items = [TextItem(t["text"], tuple(t["box"]), 1.0, t["role"]) for t in raw]
        return self._items

    def read(self, image_bytes: bytes, width: int, height: int, region: Box | None = None) -> list[TextItem]:
        items = self._load()
        rng = np.random.default_rng(self.seed)
        out = []
        for it in items:
            text = it.string
            box = it.box
            if self.p_drop > 0:
                keep = rng.random(len(text)) >= self.p_drop
                text = "".join(ch for ch, k in zip(text, keep) if k)
            if self.sigma_px > 0:
                jit = rng.normal(0.0, self.sigma_px, size=4)
                l, t, r, b = (int(round(v + d)) for v, d in zip(box, jit))
                l, r = sorted((min(max(l, 0), width - 1), min(max(r, 0), width - 1)))
                t, b = sorted((min(max(t, 0), height - 1), min(max(b, 0), height - 1)))
                box = (l, t, r, b)
            if region is not None and not _intersects(box, region):
                continue
            out.append(TextItem(text, box, 1.0, it.role_guess))
        return out


def _glyph_table(scale: int) -> dict[bytes, str]:
    table = {}
    for ch, g in font.GLYPHS.items():
        if ch == " ":
            continue
        table[np.packbits(g).tobytes()] = ch
    return table


_TABLE = _glyph_table(1)
_GLYPH_LIST = [(ch, g) for ch, g in font.GLYPHS.items() if ch != " "]


def _match_cell(cell: np.ndarray) -> tuple[str, bool]:
    if not cell.any():
        return " ", True
    key = np.packbits(cell).tobytes()
    hit = _TABLE.get(key)
    if hit is not None:
        return hit, True
    best = min(_GLYPH_LIST, key=lambda cg: int((cg[1] != cell).sum()))
    return best[0], False


class TemplateOcr:
    """Reads hard-edged 5x7 font text by exact glyph matching."""

    name = "template"

    def __init__(self, ink_max: int = 60, max_scale: int = 3) -> None:
        self.ink_max = ink_max
        self.max_scale = max_scale

    def read(self, image_bytes: bytes, width: int, height: int, region: Box | None = None) -> list[TextItem]:
        image = ChartImage.from_bytes(width, height, image_bytes)
        ink = image.pixels.max(axis=2) <= self.ink_max
        labels, n = ndimage.label(ink, structure=np.ones((3, 3), bool))
        if n == 0:
            return []
        # long thin strokes are axes or ticks, not glyphs
        for i, sl in enumerate(ndimage.find_objects(labels), start=1):
            h = sl[0].stop - sl[0].start
            w = sl[1].stop - sl[1].start
            if (h <= 2 and w > 5 * self.max_scale) or (w <= 2 and h > 7 * self.max_scale) or h > 7 * self.max_scale:
                ink[labels == i] = False
            elif w == 1 and h <= 6 and self._is_tick(ink, sl):
                ink[labels == i] = False
        items = []
        for scale in range(self.max_scale, 0, -1):
            items.extend(self._read_scale(ink, scale))
        items.sort(key=lambda it: (it.box[1], it.box[0]))
        if region is not None:
            items = [it for it in items if _intersects(it.box, region)]
        return items

    @staticmethod
    def _is_tick(ink: np.ndarray, sl) -> bool:
        # a lone vertical stroke hanging off a horizontal axis line
        top = sl[0].start
        col = sl[1].start
        return top > 0 and bool(ink[top - 1, max(col - 3, 0) : col + 4].all())

    def _read_scale(self, ink: np.ndarray, scale: int) -> list[TextItem]:
        out: list[TextItem] = []
        # removing decoded text can expose neighbours that were fused with it
        for _ in range(4):
            found = self._read_pass(ink, scale)
            out.extend(found)
            if not found:
                break
        return out

    def _read_pass(self, ink: np.ndarray, scale: int) -> list[TextItem]:
        gap = 7 * scale + 1
        h = 7 * scale
        grown = ndimage.binary_dilation(ink, structure=np.ones((1, gap), bool))
        labels, _ = ndimage.label(grown, structure=np.ones((3, 3), bool))
        out = []
        for sl in ndimage.find_objects(labels):
            ys, xs = np.nonzero(ink[sl])
            if len(ys) == 0:
                continue
            top = sl[0].start + int(ys.min())
            bottom = sl[0].start + int(ys.max())
            if bottom - top + 1 < h:
                continue
            if bottom - top + 1 > h:
                # stacked lines: try the top band on its own
                band = ink[top : top + h, sl[1]]
                bx = np.nonzero(band.any(axis=0))[0]
                if len(bx) == 0:
                    continue
                left = sl[1].start + int(bx.min())
                right = sl[1].start + int(bx.max())
                if ink[top + h, left : right + 1].any() and not ink[top + h - 1, left : right + 1].any():
                    continue
                bottom = top + h - 1
                text, conf, bl, br = self._decode(ink, left, top, right, scale)
                if text is None or conf < 1.0:
                    continue
            else:
                left = sl[1].start + int(xs.min())
                right = sl[1].start + int(xs.max())
                text, conf, bl, br = self._decode(ink, left, top, right, scale)
                if text is None or (scale > 1 and conf < 1.0):
                    continue
            ink[top : bottom + 1, left : right + 1] = False
            out.append(TextItem(text, (bl, top, br, bottom), conf, "title" if scale > 1 else "unknown"))
        return out

    @staticmethod
    def _decode(ink: np.ndarray, left: int, top: int, right: int, scale: int):
        """Best cell alignment for one text run; returns (text, conf, left, right)."""
        best = None
        h = 7 * scale
        pitch = 6 * scale
        for off in range(0, 5):
            origin = left - off * scale
            if origin < 0:
                continue
            n_cells = (right - origin) // pitch + 1
            chars = []
            exact = 0
            for c in range(n_cells):
                x = origin + c * pitch
                cell = ink[top : top + h, x : x + 5 * scale]
                if cell.shape != (h, 5 * scale):
                    cell = np.pad(cell, ((0, h - cell.shape[0]), (0, 5 * scale - cell.shape[1])))
                if scale > 1:
                    small = cell[::scale, ::scale]
                    blocky = np.array_equal(np.kron(small, np.ones((scale, scale), bool)), cell)
                    cell = small
                ch, ok = _match_cell(cell)
                if scale > 1 and not blocky:
                    ok = False
                chars.append(ch)
                exact += ok
            score = exact / max(n_cells, 1)
            if best is None or score > best[1]:
                best = (chars, score, origin)
            if score == 1.0:
                break
        if best is None:
            return None, 0.0, left, right
        chars, score, origin = best
        lead = len(chars) - len("".join(chars).lstrip())
        text = "".join(chars).strip()
        if not text:
            return None, 0.0, left, right
        box_left = origin + lead * pitch
        box_right = box_left + len(text) * pitch - scale - 1
        return text, score, box_left, box_right
