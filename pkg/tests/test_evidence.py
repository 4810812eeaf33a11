import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chartlens import bench, evidence as ev, orchestrator as orch, synthgen
from chartlens.image import ChartImage
from chartlens.qtypes import parse_question
from chartlens.scheduler import SchedulerConfig


def small_package():
    pkg = ev.EvidencePackage({"image_digest": "x"})
    ev.append(pkg, step=1, tool="detect", params={"k": 3, "eps": 0.1}, summary="found 3 bars",
              artifacts=[ev.Artifact.inline("bbox_set", [[1, 2, 3, 4]])])
    ev.append(pkg, step=2, tool="read", params={}, summary="value 4.55",
              artifacts=[ev.Artifact.inline("reading", {"value": 4.55})])
    return pkg


def test_append_ids_and_chain():
    pkg = ev.EvidencePackage()
    first = ev.append(pkg, step=0, tool="a")
    assert first.id == 1 and first.prev_hash == ev.GENESIS
    second = ev.append(pkg, step=1, tool="b")
    assert second.id == 2 and second.prev_hash == first.hash
    assert pkg.index == {"a": [1], "b": [2]}
    assert ev.verify_chain(pkg.items) is None


def test_append_after_tamper_is_refused():
    pkg = small_package()
    pkg.items[0].summary = "found 4 bars"
    assert ev.verify_chain(pkg.items) == 1
    with pytest.raises(ev.ChainBroken):
        ev.append(pkg, step=3, tool="c")


def test_serialize_round_trip_and_float_format():
    pkg = small_package()
    ev.append(pkg, step=3, tool="calc", summary="third", artifacts=[ev.Artifact.inline("reading", {"v": 1 / 3})])
    data = ev.serialize(pkg)
    # floats are written with nine significant digits
    assert b"0.333333333" in data and b"0.3333333333" not in data
    again = ev.load_bytes_verified(data)
    assert ev.serialize(again) == data


def test_truncated_and_noncanonical_bytes_rejected():
    data = ev.serialize(small_package())
    with pytest.raises(ev.SchemaViolation):
        ev.deserialize(data[: len(data) // 2])
    pretty = json.dumps(json.loads(data), indent=1).encode()
    with pytest.raises(ev.SchemaViolation):
        ev.deserialize(pretty)


def test_file_artifacts_are_relative_and_resolve(tmp_path):
    pkg = small_package()
    ev.append(pkg, step=3, tool="overlay", artifacts=[ev.Artifact.file("overlay_image_ref", b"\x89PNG fake", "png")])
    ref = pkg.items[-1].artifacts[0].ref
    assert ref.startswith("artifacts/") and not ref.startswith("/")
    ev.save(pkg, tmp_path / "p")
    loaded = ev.load(tmp_path / "p")
    assert loaded.items[-1].artifacts[0].data == b"\x89PNG fake"
    (tmp_path / "p" / ref).write_bytes(b"changed")
    with pytest.raises(ev.ChainBroken):
        ev.load(tmp_path / "p")


def test_large_inline_payload_spills_to_file():
    art = ev.Artifact.inline("table", {"rows": ["x" * 100] * 1000})
    assert art.payload is None and art.ref is not None and art.data is not None


def test_timestamp_outside_hash():
    a, b = ev.EvidencePackage(), ev.EvidencePackage()
    ev.append(a, step=0, tool="t", timestamp="2024-01-01T00:00:00Z")
    ev.append(b, step=0, tool="t", timestamp="2025-06-01T00:00:00Z")
    assert a.head == b.head


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_any_single_byte_change_is_detected(data):
    raw = bytearray(ev.serialize(small_package()))
    start = raw.index(b'"items"')
    end = raw.index(b'"meta"') if raw.index(b'"meta"') > start else len(raw)
    pos = data.draw(st.integers(start, end - 1))
    new = data.draw(st.integers(0, 255).filter(lambda b: b != raw[pos]))
    raw[pos] = new
    with pytest.raises((ev.SchemaViolation, ev.ChainBroken)):
        ev.load_bytes_verified(bytes(raw))


def sim_package(seed=0):
    env = bench.bit_environment(2)
    return bench.run_sim_episode(env, SchedulerConfig(), seed % 4, seed).package, bench.sim_registry(env.tools)


def test_replay_unmodified_sim_package():
    pkg, reg = sim_package(3)
    report = ev.replay_verify(pkg, bench._SIM_IMAGE, reg)
    assert report.all_match and report.checks
    assert report.to_dict() == ev.replay_verify(pkg, bench._SIM_IMAGE, reg).to_dict()


def test_replay_flags_edited_reading_and_keeps_checking():
    pkg, reg = sim_package(5)
    tool_items = [it for it in pkg.items if it.status == "ok"]
    assert len(tool_items) >= 2
    target = tool_items[0]
    target.artifacts[0].payload["value"] = 1 - target.artifacts[0].payload["value"]
    report = ev.replay_verify(pkg, bench._SIM_IMAGE, reg)
    assert report.mismatched == [target.id]
    assert len(report.checks) == len(tool_items)
    assert not report.chain_ok and report.broken_at == target.id


def test_replay_wrong_image_and_missing_tool():
    pkg, reg = sim_package(1)
    with pytest.raises(ev.ImageMismatch):
        ev.replay_verify(pkg, ChartImage(np.zeros((1, 1, 3), np.uint8)), reg)
    with pytest.raises(ev.MissingTool):
        ev.replay_verify(pkg, bench._SIM_IMAGE, orch.Registry())


def test_replay_real_bar_episode(tmp_path):
    spec = synthgen.generate_spec("bar", 77, {"annotated": False})
    image, gt = synthgen.render(spec)
    q, _ = bench.nqa_question(gt, 0)
    res = orch.run_episode(image, parse_question(q), seed=77)
    ev.save(res.package, tmp_path)
    pkg = ev.load(tmp_path)
    from chartlens.tools import default_registry

    assert ev.replay_verify(pkg, image, default_registry()).all_match
