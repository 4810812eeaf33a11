import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chartlens import synthgen
from chartlens.image import decode_ppm
from chartlens.synthgen import ChartSpec, Series


def bar_spec(value=4.5, step=0.5, annotated=False, edge="hard"):
    return ChartSpec("bar", [Series("SALES", (31, 119, 180), [value, 2.0, 3.0])], ["A", "B", "C"],
                     [(0.0, 6.0)], step, annotated, (512, 512), 0, edge)


def test_pie_spec_values_positive():
    spec = synthgen.generate_spec("pie", 7, {"n_sectors": 4})
    vals = spec.series[0].values
    assert len(vals) == 4
    assert all(v >= 0 for v in vals) and sum(vals) > 0


def test_generate_spec_deterministic():
    a = synthgen.generate_spec("bar", 7)
    b = synthgen.generate_spec("bar", 7)
    assert a.to_json() == b.to_json()


def test_pie_min_share_over_seed_sweep():
    for seed in range(200):
        spec = synthgen.generate_spec("pie", seed, {"min_share": 0.04})
        vals = spec.series[0].values
        total = sum(vals)
        assert min(vals) / total >= 0.04 - 1e-3


def test_unsupported_chart_type():
    with pytest.raises(synthgen.UnsupportedChartType):
        synthgen.generate_spec("radar", 1)


def test_bar_top_sits_nine_ticks_above_baseline():
    image, gt = synthgen.render(bar_spec())
    bar = next(b for b in gt.bars if b["category"] == "A")
    baseline = gt.x_axis[1]
    ticks = (baseline - bar["box"][1]) / gt.pixels_per_tick
    assert ticks == pytest.approx(9.0, abs=1.0 / gt.pixels_per_tick)


def test_render_twice_identical():
    spec = synthgen.generate_spec("line", 11)
    a, ga = synthgen.render(spec)
    b, gb = synthgen.render(spec)
    assert a.to_bytes() == b.to_bytes()
    assert ga.to_dict() == gb.to_dict()


def test_pie_angular_spans():
    spec = ChartSpec("pie", [Series("SHARE", (0, 0, 0), [40, 30, 20, 10])], ["A", "B", "C", "D"], [], 10.0,
                     category_colors=[(31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40)])
    _, gt = synthgen.render(spec)
    spans = [s["end"] - s["start"] for s in gt.sectors]
    assert spans == pytest.approx([144.0, 108.0, 72.0, 36.0], abs=1e-9)


def test_deannotate_flips_flag_and_is_idempotent():
    spec = bar_spec(annotated=True)
    d = synthgen.deannotate(spec)
    assert d.annotated is False
    assert synthgen.deannotate(d) == d


def test_deannotated_corpus_has_no_value_labels_and_same_data():
    for i in range(50):
        kind = ("bar", "line", "pie", "donut", "scatter")[i % 5]
        spec = synthgen.generate_spec(kind, 300 + i, {"annotated": True})
        _, ga = synthgen.render(spec)
        _, gd = synthgen.render(synthgen.deannotate(spec))
        assert gd.value_labels() == []
        assert ga.data_table == gd.data_table


def test_hard_edge_bar_interiors_equal_series_color():
    spec = synthgen.generate_spec("bar", 21, {"edge_style": "hard", "annotated": False})
    image, gt = synthgen.render(spec)
    for bar in gt.bars:
        l, t, r, b = bar["box"]
        inner = image.pixels[t + 1 : b, l + 1 : r]
        assert (inner == np.array(bar["color"], dtype=np.uint8)).all()


def test_write_corpus_counts_and_round_trip(tmp_path):
    specs = [synthgen.generate_spec(k, 5) for k in ("bar", "pie", "line")]
    manifest = synthgen.write_corpus(specs, tmp_path)
    assert len(manifest.rows) == 3
    assert len(list(tmp_path.glob("*.ppm"))) == 3
    assert len(list(tmp_path.glob("chart_*.json"))) == 3
    for spec, row in zip(specs, manifest.rows):
        image, _ = synthgen.render(spec)
        loaded = decode_ppm((tmp_path / row["image"]).read_bytes())
        assert np.array_equal(loaded.pixels, image.pixels)
        _, spec2, _ = synthgen.load_corpus_item(tmp_path, row)
        assert spec2 == spec


def test_write_empty_corpus(tmp_path):
    manifest = synthgen.write_corpus([], tmp_path / "c")
    assert manifest.rows == []
    assert list((tmp_path / "c").glob("*.ppm")) == []


def test_canvas_below_minimum_is_invalid():
    spec = bar_spec()
    spec.canvas = (40, 40)
    with pytest.raises(synthgen.InvalidSpec):
        synthgen.render(spec)


def test_too_many_bars_for_canvas():
    labels = [f"C{i}" for i in range(80)]
    spec = ChartSpec("bar", [Series("S", (31, 119, 180), [1.0] * 80)], labels, [(0.0, 6.0)], 0.5, False, (128, 128))
    with pytest.raises(synthgen.CanvasTooSmall):
        synthgen.render(spec)


@settings(max_examples=25, deadline=None)
@given(kind=st.sampled_from(["bar", "line", "pie", "donut", "scatter"]), seed=st.integers(0, 10_000))
def test_deannotation_preserves_data_property(kind, seed):
    spec = synthgen.generate_spec(kind, seed)
    _, ga = synthgen.render(spec)
    _, gd = synthgen.render(synthgen.deannotate(spec))
    assert ga.data_table == gd.data_table


@settings(max_examples=25, deadline=None)
@given(kind=st.sampled_from(["bar", "line", "pie", "donut", "scatter"]), seed=st.integers(0, 10_000))
def test_spec_json_round_trip_property(kind, seed):
    spec = synthgen.generate_spec(kind, seed)
    assert ChartSpec.from_dict(spec.to_dict()) == spec
