import math

import pytest
from hypothesis import given, settings, strategies as st

from chartlens import perception as pc
from chartlens import reasoning as rs
from chartlens import synthgen
from chartlens.image import ChartImage


def _bars(*xs_tops):
    bars = [pc.BarRect((x - 10, top, x + 10, 400), (31, 119, 180)) for x, top in xs_tops]
    return pc.KeyElements((0, 0, 500, 400), (0, 400, 500, 400), (0, 0, 0, 400), bars=bars)


def test_classify_corpus_accuracy():
    kinds = ("bar", "line", "pie", "donut", "scatter")
    hits = 0
    n = 500
    for i in range(n):
        kind = kinds[i % 5]
        image, _ = synthgen.render(synthgen.generate_spec(kind, 2000 + i))
        hits += rs.classify_chart(image)[0] == kind
    assert hits / n >= 0.98


def test_classify_blank():
    kind, conf = rs.classify_chart(ChartImage.blank(256, 256))
    assert kind == "unknown" and conf <= 0.2


def test_calc_examples():
    assert rs.calc("normalize", [2, 3, 5]) == pytest.approx([0.2, 0.3, 0.5])
    assert rs.calc("compare", [4.55, 3.2]) == "greater"
    assert rs.calc("ratio", [36, 360]) == pytest.approx(0.1)
    assert rs.calc("sum", [1, 2, 3.5]) == 6.5
    assert rs.calc("diff", [5, 2]) == 3
    assert rs.calc("scale", [9.1, 0.5]) == pytest.approx(4.55)
    assert rs.calc("compare", [1.0, 1.0 + 1e-12]) == "equal"
    with pytest.raises(rs.DivisionByZero):
        rs.calc("ratio", [1, 0])
    with pytest.raises(rs.ArityMismatch):
        rs.calc("diff", [1, 2, 3])


@settings(max_examples=200)
@given(st.lists(st.floats(1e-6, 1e6), min_size=1, max_size=20))
def test_normalize_sums_to_one(vals):
    assert abs(math.fsum(rs.calc("normalize", vals)) - 1.0) <= 1e-12


@settings(max_examples=300)
@given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6))
def test_compare_consistent_with_real_order(a, b):
    got = rs.calc("compare", [a, b])
    if abs(a - b) > 1e-9:
        assert got == ("greater" if a > b else "less")
        assert rs.calc("compare", [b, a]) == ("less" if a > b else "greater")
    else:
        assert got == "equal"


def test_relation_graph_two_bars():
    g = rs.build_relation_graph(_bars((100, 200), (200, 300)))
    assert ("bar:0", "bar:1") in [(s, d) for s, d, _, _ in g.edges_of("left_of")]
    assert rs.above_relation(g, "bar:0", "bar:1") == "greater"


def test_relation_graph_single_bar():
    g = rs.build_relation_graph(_bars((100, 200)), [], None)
    assert len(g.nodes) == 1 and g.edges == []


def test_relation_graph_five_bar_chain():
    g = rs.build_relation_graph(_bars((300, 50), (100, 80), (500, 90), (200, 10), (400, 60)))
    left = g.edges_of("left_of")
    assert len(left) == 4
    order = ["bar:1", "bar:3", "bar:0", "bar:4", "bar:2"]
    assert [(s, d) for s, d, _, _ in left] == list(zip(order, order[1:]))


@settings(max_examples=100)
@given(st.lists(st.tuples(st.integers(10, 490), st.integers(0, 399)), min_size=1, max_size=8))
def test_relation_graph_spatial_edges_irreflexive_antisymmetric(bars):
    g = rs.build_relation_graph(_bars(*bars))
    for kind in rs.SPATIAL:
        pairs = {(s, d) for s, d, _, _ in g.edges_of(kind)}
        assert all(s != d for s, d in pairs)
        assert not any((d, s) in pairs for s, d in pairs)
    for s, d, _, _ in g.edges:
        assert s in g.nodes and d in g.nodes


def test_relation_graph_empty():
    with pytest.raises(rs.EmptyInput):
        rs.build_relation_graph(None, [], None)


def test_structure_table_examples():
    reads = [rs.CellReading(i, 0, v, 10 + i) for i, v in enumerate([1.0, 2.0, 3.0])]
    t = rs.structure_table(reads, ["A", "B", "C"], {0: "SALES"})
    assert (len(t.row_keys), len(t.col_keys)) == (3, 1)
    assert t.cells[("B", "SALES")] == 2.0
    assert t.provenance[("C", "SALES")]["evidence_id"] == 12
    t = rs.structure_table([rs.CellReading(0, 0, 4.0, 1)], [None], {0: "SALES"})
    assert t.row_keys == ["c0"]
    assert "positional_row" in t.provenance[("c0", "SALES")]["flags"]
    with pytest.raises(rs.EmptyInput):
        rs.structure_table([], [], {})


@settings(max_examples=100)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 2), st.floats(0, 100), st.integers(1, 50)), min_size=1, max_size=12))
def test_structure_table_provenance_closure(rows):
    reads = [rs.CellReading(c, s, v, e) for c, s, v, e in rows]
    ids = {e for *_, e in rows}
    t = rs.structure_table(reads, ["A", "B", None, "D", "E", "F"], {0: "X", 1: "Y"})
    assert set(t.cells) == set(t.provenance)
    assert {p["evidence_id"] for p in t.provenance.values()} <= ids
    assert rs.DataTable.from_dict(t.to_dict()).to_dict() == t.to_dict()
