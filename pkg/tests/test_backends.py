import json
import sys
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from ovlift.backends import (
    BackendBundle,
    BackendError,
    FixtureBackend,
    FixtureStore,
    MaskRecord,
    RecordingBackend,
    RLEError,
    SubprocessBackend,
    crop_box,
    decode_rle,
    encode_rle,
    fixture_embed_texts,
    fixture_segment,
)


def make_store(root):
    (root / "masks" / "frame_0").mkdir(parents=True)
    (root / "masks" / "frame_0" / "prompt_1.rle").write_text("2 2\n0 1 3\n")
    (root / "tags").mkdir()
    (root / "tags" / "frame_0.json").write_text(json.dumps(["chair", "blue"]))
    (root / "embeds").mkdir()
    vecs = np.array([[2.0, 0, 0], [0, 0.5, 0], [0.6, 0.8, 0]], dtype="<f4")
    vecs.tofile(root / "embeds" / "vectors.f32")
    manifest = {"dim": 3, "offsets": {"text:a": 0, "text:b": 1, "crop:0:1": 2}}
    (root / "embeds" / "manifest.json").write_text(json.dumps(manifest))
    return root


@pytest.fixture
def store(tmp_path):
    return FixtureStore(make_store(tmp_path / "fx"))


def test_rle_example():
    assert decode_rle("0 1 3", 2, 2).reshape(-1).tolist() == [False, True, True, True]


def test_rle_bad_sum():
    with pytest.raises(RLEError):
        decode_rle("0 1 2", 2, 2)


def test_rle_garbage():
    with pytest.raises(RLEError):
        decode_rle("0 x", 1, 1)
    with pytest.raises(RLEError):
        decode_rle("2 4", 2, 2)


@given(arrays(bool, st.tuples(st.integers(1, 9), st.integers(1, 9))))
def test_rle_round_trip(mask):
    text = encode_rle(mask)
    assert text.split()[0] == "0"
    assert np.array_equal(decode_rle(text, *mask.shape), mask)


def test_mask_record_text():
    m = np.array([[True, False], [False, False]])
    rec = MaskRecord(0, 1, m)
    assert np.array_equal(MaskRecord.from_text(rec.to_text(), 0, 1).mask, m)


def test_fixture_segment_hit_and_miss(store):
    assert fixture_segment(store, 0, 1).reshape(-1).tolist() == [False, True, True, True]
    assert fixture_segment(store, 0, 99) is None
    assert fixture_segment(store, 7, 1) is None


def test_fixture_texts(store):
    mat = fixture_embed_texts(store, ["a", "b"])
    assert mat.shape == (2, 3)
    np.testing.assert_allclose(np.linalg.norm(mat, axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(mat[0], [1, 0, 0])


def test_fixture_text_missing_named(store):
    with pytest.raises(BackendError, match="tags: c$"):
        fixture_embed_texts(store, ["a", "c"])


def test_fixture_backend_ignores_pixels(store):
    be = FixtureBackend(store)
    fr = SimpleNamespace(frame_id=0)
    a = be.segment(fr, 1, [(0, 0)])
    b = be.segment(fr, 1, [(1, 1), (0, 1)])
    assert np.array_equal(a, b)
    assert be.tag(fr) == ["chair", "blue"]


def test_bundle_normalises_and_checks_shapes(store):
    bundle = BackendBundle(FixtureBackend(store))
    fr = SimpleNamespace(frame_id=0, height=2, width=2)
    vec = bundle.embed_image(fr, (0, 0, 2, 2), 1)
    assert np.linalg.norm(vec) == pytest.approx(1.0, abs=1e-6)
    bad = SimpleNamespace(frame_id=0, height=3, width=3)
    with pytest.raises(BackendError):
        bundle.segment(bad, 1, [])


def test_crop_box():
    m = np.zeros((20, 20), bool)
    m[5:15, 4:14] = True
    assert crop_box(m, 0.1) == (3, 4, 15, 16)
    assert crop_box(m, 0.0) == (4, 5, 14, 15)
    assert crop_box(np.zeros((3, 3), bool)) is None
    full = np.ones((4, 4), bool)
    assert crop_box(full, 0.5) == (0, 0, 4, 4)


def test_recording_round_trip(store, tmp_path):
    rec = RecordingBackend(FixtureBackend(store))
    fr = SimpleNamespace(frame_id=0)
    rec.segment(fr, 1, [])
    rec.tag(fr)
    rec.embed_image(fr, None, 1)
    rec.record_texts(["a"])
    rec.save(tmp_path / "copy")
    copy = FixtureStore(tmp_path / "copy")
    assert np.array_equal(copy.mask(0, 1), store.mask(0, 1))
    assert copy.tags(0) == ["chair", "blue"]
    np.testing.assert_allclose(copy.vector("crop:0:1"), store.vector("crop:0:1"))
    # text embeddings pass through the fixture's normalisation before recording
    np.testing.assert_allclose(copy.vector("text:a"), [1, 0, 0])


def test_subprocess_round_trip(store):
    be = SubprocessBackend([sys.executable, "-m", "ovlift.worker", "--fixtures", str(store.root)])
    try:
        fr = SimpleNamespace(frame_id=0, image_ref="")
        mask = be.segment(fr, 1, [(10, 12)])
        assert mask.reshape(-1).tolist() == [False, True, True, True]
        assert be.segment(fr, 5, [(0, 0)]) is None
        assert be.tag(fr) == ["chair", "blue"]
        resp = be.call({"op": "embed_text", "texts": ["a"]})
        assert len(resp["vectors"]) == 1 and len(resp["vectors"][0]) == 3
        assert "id" in resp
        with pytest.raises(BackendError, match="tags: c$"):
            be.embed_texts(["c"])
    finally:
        be.close()


def test_subprocess_child_exit():
    code = "import sys; sys.stdin.readline(); sys.stderr.write('boom\\n'); sys.exit(3)"
    be = SubprocessBackend([sys.executable, "-c", code])
    with pytest.raises(BackendError, match="exit"):
        be.call({"op": "tag", "frame": 0})
    be.close()


def test_subprocess_malformed_json():
    code = "import sys; sys.stdin.readline(); print('not json', flush=True); sys.stdin.readline()"
    be = SubprocessBackend([sys.executable, "-c", code])
    with pytest.raises(BackendError, match="malformed"):
        be.call({"op": "tag", "frame": 0})
    be.close()


def test_subprocess_timeout():
    code = "import sys, time; sys.stdin.readline(); time.sleep(5)"
    be = SubprocessBackend([sys.executable, "-c", code], timeout=0.3)
    with pytest.raises(BackendError, match="timed out"):
        be.call({"op": "tag", "frame": 0})
    be.proc.kill()
    be.close()


def test_subprocess_missing_binary():
    with pytest.raises(BackendError):
        SubprocessBackend(["/nonexistent/backend-binary"])
