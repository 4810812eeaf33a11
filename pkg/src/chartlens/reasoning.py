"""Reasoning tools: chart routing, arithmetic, element relations, tables."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

from chartlens import perception, raster
from chartlens.font import normalize_text
from chartlens.image import ChartImage

CHART_LABELS = ("bar", "line", "pie", "donut", "scatter", "unknown")
COMPARE_TOL = 1e-9


class DivisionByZero(ZeroDivisionError):
    pass


class ArityMismatch(ValueError):
    pass


class EmptyInput(ValueError):
    pass


# ---------------------------------------------------------------- classification


def classify_chart(image: ChartImage) -> tuple[str, float]:
    """Route a chart to a type from axis, circle, bar and stroke evidence."""
    try:
        ke = perception.detect_key_elements(image)
    except perception.NoAxesFound:
        ke = None
    if ke is None:
        try:
            region, cx, cy, r = perception._circle_region(image)
        except perception.NoCircularRegion:
            return "unknown", 0.1
        r_in = perception._inner_radius(region, cx, cy, r)
        if r_in > 0.15 * r:
            return "donut", 0.9
        return "pie", 0.9
    if ke.bars:
        return "bar", min(1.0, 0.6 + 0.1 * len(ke.bars))
    x0, top, x1, y0 = ke.plot_area
    crop = ChartImage(image.pixels[top:y0, x0 + 1 : x1 + 1])
    colored = perception.color_mask(crop)
    comps = [c for c in raster.connected_components(colored) if c.size >= 6]
    if not comps:
        return "unknown", 0.2
    plot_w = max(x1 - x0, 1)
    widest = max(c.width for c in comps)
    small = [c for c in comps if c.width <= 12 and c.height <= 12]
    if widest >= 0.3 * plot_w:
        return "line", 0.85
    if len(small) >= 2 and len(small) >= 0.6 * len(comps):
        return "scatter", 0.8
    return "unknown", 0.3


# ---------------------------------------------------------------- calc


_ARITY = {"sum": None, "normalize": None, "ratio": 2, "diff": 2, "compare": 2, "scale": 2}


def calc(op: str, operands: Sequence[float]) -> float | list[float] | str:
    """Exact arithmetic over operands.

    ``sum`` and ``normalize`` take one or more values; ``ratio``, ``diff``,
    ``compare`` and ``scale`` take exactly two. ``compare`` returns
    'greater', 'less' or 'equal' (absolute tolerance 1e-9).
    """
    if op not in _ARITY:
        raise ValueError(f"unknown calc op {op!r}")
    vals = [float(v) for v in operands]
    want = _ARITY[op]
    if want is None and len(vals) < 1:
        raise ArityMismatch(f"{op} needs at least one operand")
    if want is not None and len(vals) != want:
        raise ArityMismatch(f"{op} needs {want} operands, got {len(vals)}")
    if op == "sum":
        return math.fsum(vals)
    if op == "normalize":
        total = math.fsum(vals)
        if total == 0:
            raise DivisionByZero("cannot normalize values summing to zero")
        return [v / total for v in vals]
    a, b = vals
    if op == "ratio":
        if b == 0:
            raise DivisionByZero("ratio with zero denominator")
        return a / b
    if op == "diff":
        return a - b
    if op == "scale":
        return a * b
    if abs(a - b) <= COMPARE_TOL:
        return "equal"
    return "greater" if a > b else "less"


# ---------------------------------------------------------------- relation graph


SPATIAL = ("left_of", "above")


@dataclass
class RelationGraph:
    nodes: dict[str, dict[str, Any]] = field(default_factory=dict)
    edges: list[tuple[str, str, str, float | None]] = field(default_factory=list)

    def add_edge(self, src: str, dst: str, kind: str, magnitude: float | None = None) -> None:
        if src not in self.nodes or dst not in self.nodes:
            raise KeyError(f"edge {src}->{dst} references a missing node")
        if src == dst and kind in SPATIAL:
            raise ValueError("spatial relations are irreflexive")
        self.edges.append((src, dst, kind, magnitude))

    def edges_of(self, kind: str) -> list[tuple[str, str, str, float | None]]:
        return [e for e in self.edges if e[2] == kind]

    def to_dict(self) -> dict:
        return {
            "nodes": {k: dict(v) for k, v in sorted(self.nodes.items())},
            "edges": [{"src": s, "dst": d, "kind": k, "magnitude": m} for s, d, k, m in self.edges],
        }


def _chain(graph: RelationGraph, ordered: list[tuple[float, str]], kind: str) -> None:
    for (pa, a), (pb, b) in zip(ordered, ordered[1:]):
        if pa == pb:
            continue  # equal positions carry no strict relation
        graph.add_edge(a, b, kind, float(pb - pa))


def build_relation_graph(
    elements: perception.KeyElements | None,
    sectors: Sequence[perception.SectorEstimate] | None = None,
    mapping: dict[str, Sequence[str]] | None = None,
) -> RelationGraph:
    """Bars and sectors as nodes; left_of and above as transitive-reduced chains.

    ``mapping`` maps a legend label to the node ids drawn in its colour and
    produces legend_of edges plus same_series chains.
    """
    g = RelationGraph()
    bars = elements.bars if elements is not None else []
    for i, b in enumerate(bars):
        g.nodes[f"bar:{i}"] = {"kind": "bar", "box": list(b.box), "color": list(b.color)}
    for i, s in enumerate(sectors or []):
        g.nodes[f"sector:{i}"] = {"kind": "sector", "proportion": s.proportion, "color": list(s.color)}
    for label in sorted(mapping or {}):
        g.nodes[f"legend:{label}"] = {"kind": "legend", "label": label}
    if not g.nodes:
        raise EmptyInput("no elements to relate")
    # left_of: consecutive bars by centre x
    _chain(g, sorted(((b.center_x, f"bar:{i}") for i, b in enumerate(bars)), key=lambda t: (t[0], t[1])), "left_of")
    # above: a bar whose top is higher on screen is above the next one
    _chain(g, sorted(((float(b.box[1]), f"bar:{i}") for i, b in enumerate(bars)), key=lambda t: (t[0], t[1])), "above")
    for label in sorted(mapping or {}):
        members = [m for m in mapping[label] if m in g.nodes]
        for m in members:
            g.add_edge(f"legend:{label}", m, "legend_of")
        for a, b in zip(members, members[1:]):
            g.add_edge(a, b, "same_series")
    return g


def above_relation(graph: RelationGraph, a: str, b: str) -> str | None:
    """Ordering of bar ``a`` against bar ``b`` by bar height, or None."""
    tops = {k: v["box"][1] for k, v in graph.nodes.items() if v.get("kind") == "bar"}
    if a not in tops or b not in tops:
        return None
    if tops[a] == tops[b]:
        return "equal"
    return "greater" if tops[a] < tops[b] else "less"


# ---------------------------------------------------------------- tables


@dataclass
class CellReading:
    category: int
    series: int
    value: float
    evidence_id: int
    source: str = "read_via_auxline"


@dataclass
class DataTable:
    row_keys: list[str]
    col_keys: list[str]
    cells: dict[tuple[str, str], float | str] = field(default_factory=dict)
    provenance: dict[tuple[str, str], dict[str, Any]] = field(default_factory=dict)

    def triples(self) -> list[tuple[str, str, float | str]]:
        return [(r, c, self.cells[(r, c)]) for r in self.row_keys for c in self.col_keys if (r, c) in self.cells]

    def is_complete(self) -> bool:
        return bool(self.row_keys) and all((r, c) in self.cells for r in self.row_keys for c in self.col_keys)

    def to_dict(self) -> dict:
        return {
            "row_keys": list(self.row_keys),
            "col_keys": list(self.col_keys),
            "cells": [
                {"r": r, "c": c, "value": v, "provenance": self.provenance.get((r, c))}
                for r, c, v in self.triples()
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DataTable":
        t = cls(list(d["row_keys"]), list(d["col_keys"]))
        for cell in d["cells"]:
            key = (cell["r"], cell["c"])
            t.cells[key] = cell["value"]
            if cell.get("provenance") is not None:
                t.provenance[key] = cell["provenance"]
        return t

    @classmethod
    def from_triples(cls, triples: Sequence[tuple[str, str, float]]) -> "DataTable":
        rows: list[str] = []
        cols: list[str] = []
        t = cls(rows, cols)
        for r, c, v in triples:
            if r not in rows:
                rows.append(r)
            if c not in cols:
                cols.append(c)
            t.cells[(r, c)] = v
        return t


def structure_table(
    readings: Sequence[CellReading],
    labels: Sequence[str | None],
    mapping: dict[int, str] | None = None,
) -> DataTable:
    """Assemble readings into a category x series table with provenance.

    ``labels[i]`` names category ``i``; ``mapping`` names series indices.
    Missing names fall back to positional keys ('c0', 's0') and the cell's
    provenance is flagged.
    """
    if not readings:
        raise EmptyInput("no readings to structure")
    mapping = mapping or {}
    rows: list[str] = []
    cols: list[str] = []
    table = DataTable(rows, cols)
    for rd in sorted(readings, key=lambda r: (r.category, r.series)):
        flags = []
        label = labels[rd.category] if 0 <= rd.category < len(labels) else None
        if label:
            rkey = normalize_text(label)
        else:
            rkey = f"c{rd.category}"
            flags.append("positional_row")
        if rd.series in mapping and mapping[rd.series]:
            ckey = normalize_text(mapping[rd.series])
        else:
            ckey = f"s{rd.series}"
            flags.append("positional_col")
        if rkey not in rows:
            rows.append(rkey)
        if ckey not in cols:
            cols.append(ckey)
        table.cells[(rkey, ckey)] = float(rd.value)
        table.provenance[(rkey, ckey)] = {"evidence_id": int(rd.evidence_id), "source": rd.source, "flags": flags}
    return table


def table_from_ground_truth(rows: Sequence[tuple[str, str, float]]) -> DataTable:
    return DataTable.from_triples([(str(r), str(c), float(v)) for r, c, v in rows])

