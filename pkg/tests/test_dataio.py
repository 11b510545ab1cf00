import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from taldet.dataio import (AnnotationRecord, FormatError, SyntheticSpec,
                           ValidationError, generate_synthetic,
                           read_annotations, read_checkpoint, read_detections,
                           read_features, write_annotations, write_checkpoint,
                           write_detections, write_features)
from taldet.heads import GroundTruthSegment
from taldet.postprocess import ActionSegment
from taldet.subjects import SubjectBox


class TestFeatureFiles:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        arr = rng.normal(size=(3, 4, 4, 5)).astype(np.float32)
        p = tmp_path / "f.ptfv"
        write_features(p, arr)
        back = read_features(p)
        np.testing.assert_array_equal(back, arr.astype(np.float64))

    def test_header_layout_and_size(self, tmp_path):
        # 4-byte magic + 5 little-endian u32 = 24-byte header, then
        # 4 bytes per float32 element
        arr = np.zeros((2, 2, 2, 3), dtype=np.float32)
        p = tmp_path / "f.ptfv"
        write_features(p, arr)
        raw = p.read_bytes()
        assert len(raw) == 24 + 4 * arr.size
        assert raw[:4] == b"PTFV"
        assert struct.unpack("<5I", raw[4:24]) == (1, 2, 2, 2, 3)

    def test_write_read_is_idempotent_bytes(self, tmp_path):
        arr = np.random.default_rng(1).normal(size=(1, 2, 2, 2))
        p1, p2 = tmp_path / "a.ptfv", tmp_path / "b.ptfv"
        write_features(p1, arr)
        write_features(p2, read_features(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.ptfv"
        p.write_bytes(b"XXXX" + b"\0" * 20)
        with pytest.raises(FormatError, match="magic"):
            read_features(p)

    def test_truncated_header(self, tmp_path):
        p = tmp_path / "short.ptfv"
        p.write_bytes(b"PTFV\0\0")
        with pytest.raises(FormatError, match="truncated"):
            read_features(p)

    def test_payload_size_mismatch_reports_bytes(self, tmp_path):
        p = tmp_path / "f.ptfv"
        write_features(p, np.zeros((1, 1, 1, 2)))
        p.write_bytes(p.read_bytes()[:-4])
        with pytest.raises(FormatError, match="expected 32 bytes, found 28"):
            read_features(p)

    def test_unsupported_version(self, tmp_path):
        p = tmp_path / "f.ptfv"
        write_features(p, np.zeros((1, 1, 1, 1)))
        raw = bytearray(p.read_bytes())
        raw[4] = 9
        p.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="version"):
            read_features(p)

    def test_non_finite_rejected_on_write(self, tmp_path):
        arr = np.zeros((1, 1, 1, 1))
        arr[0, 0, 0, 0] = np.nan
        with pytest.raises(ValidationError):
            write_features(tmp_path / "f.ptfv", arr)

    def test_wrong_rank_rejected(self, tmp_path):
        with pytest.raises(ValidationError):
            write_features(tmp_path / "f.ptfv", np.zeros((2, 2)))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=15, deadline=None)
    def test_round_trip_property(self, seed):
        import tempfile
        rng = np.random.default_rng(seed)
        shape = tuple(int(rng.integers(1, 5)) for _ in range(4))
        arr = rng.normal(size=shape).astype(np.float32)
        with tempfile.TemporaryDirectory() as d:
            p = f"{d}/f.ptfv"
            write_features(p, arr)
            np.testing.assert_array_equal(read_features(p), arr)


def sample_record(vid="v0", T=4):
    segments = [GroundTruthSegment(0, 0.1, 0.9)]
    boxes = [[SubjectBox(0, 0, 16, 16, 0.9)] for _ in range(T)]
    return AnnotationRecord(vid, 16.0, 64, 64, 4, segments, boxes)


class TestAnnotations:
    def test_round_trip(self, tmp_path):
        p = tmp_path / "ann.jsonl"
        recs = [sample_record("a"), sample_record("b", T=2)]
        recs[1].segments = [GroundTruthSegment(1, 0.0, 0.5)]
        write_annotations(p, recs)
        back = read_annotations(p)
        assert [r.id for r in back] == ["a", "b"]
        assert back[0].segments == recs[0].segments
        assert back[1].boxes == recs[1].boxes
        assert back[0].fps == 16.0 and back[0].snippet_stride == 4

    def test_unknown_field_rejected(self, tmp_path):
        p = tmp_path / "ann.jsonl"
        write_annotations(p, [sample_record()])
        obj = json.loads(p.read_text())
        obj["extra"] = 1
        p.write_text(json.dumps(obj) + "\n")
        with pytest.raises(ValidationError, match="unknown"):
            read_annotations(p)

    def test_missing_field_rejected(self, tmp_path):
        p = tmp_path / "ann.jsonl"
        write_annotations(p, [sample_record()])
        obj = json.loads(p.read_text())
        del obj["fps"]
        p.write_text(json.dumps(obj) + "\n")
        with pytest.raises(ValidationError, match="missing"):
            read_annotations(p)

    def test_segment_outside_video_rejected(self, tmp_path):
        p = tmp_path / "ann.jsonl"
        rec = sample_record(T=4)  # duration = 4 * 4 / 16 = 1.0s
        rec.segments = [GroundTruthSegment(0, 0.5, 5.0)]
        write_annotations(p, [rec])
        with pytest.raises(ValidationError, match="outside"):
            read_annotations(p)

    def test_invalid_json_line(self, tmp_path):
        p = tmp_path / "ann.jsonl"
        p.write_text("{not json\n")
        with pytest.raises(FormatError, match=":1:"):
            read_annotations(p)

    def test_blank_lines_skipped(self, tmp_path):
        p = tmp_path / "ann.jsonl"
        write_annotations(p, [sample_record()])
        p.write_text(p.read_text() + "\n\n")
        assert len(read_annotations(p)) == 1


class TestDetections:
    def test_round_trip(self, tmp_path):
        p = tmp_path / "dets.jsonl"
        dets = {"v1": [ActionSegment(0, 0.9, 0.0, 1.0),
                       ActionSegment(1, 0.5, 2.0, 3.0)],
                "v0": [ActionSegment(0, 0.25, 0.5, 1.5)]}
        write_detections(p, dets)
        back = read_detections(p)
        assert back == dets

    def test_zero_detection_video_round_trip(self, tmp_path):
        p = tmp_path / "dets.jsonl"
        write_detections(p, {"empty": []})
        assert read_detections(p) == {}
        assert p.read_text() == ""

    def test_bad_fields(self, tmp_path):
        p = tmp_path / "dets.jsonl"
        p.write_text(json.dumps({"video_id": "v", "class_id": 0}) + "\n")
        with pytest.raises(ValidationError):
            read_detections(p)


class TestCheckpoints:
    def test_round_trip_names_shapes_values(self, tmp_path):
        rng = np.random.default_rng(2)
        arrays = [("layer.w", rng.normal(size=(3, 4)).astype(np.float32)),
                  ("layer.b", rng.normal(size=4).astype(np.float32)),
                  ("ema/layer.w", rng.normal(size=(3, 4)).astype(np.float32))]
        p = tmp_path / "m.ptck"
        write_checkpoint(p, arrays)
        back = read_checkpoint(p)
        assert [n for n, _ in back] == [n for n, _ in arrays]
        for (_, a), (_, b) in zip(arrays, back):
            np.testing.assert_array_equal(a.astype(np.float64), b)

    def test_write_read_write_bitwise_stable(self, tmp_path):
        arrays = [("w", np.arange(6, dtype=np.float32).reshape(2, 3))]
        p1, p2 = tmp_path / "a.ptck", tmp_path / "b.ptck"
        write_checkpoint(p1, arrays)
        write_checkpoint(p2, read_checkpoint(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_trailing_bytes_rejected(self, tmp_path):
        p = tmp_path / "m.ptck"
        write_checkpoint(p, [("w", np.zeros(2, dtype=np.float32))])
        p.write_bytes(p.read_bytes() + b"\0\0")
        with pytest.raises(FormatError, match="trailing"):
            read_checkpoint(p)

    def test_truncated_rejected(self, tmp_path):
        p = tmp_path / "m.ptck"
        write_checkpoint(p, [("w", np.zeros((2, 2), dtype=np.float32))])
        p.write_bytes(p.read_bytes()[:10])
        with pytest.raises(FormatError):
            read_checkpoint(p)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "m.ptck"
        p.write_bytes(b"NOPE" + b"\0" * 8)
        with pytest.raises(FormatError):
            read_checkpoint(p)


class TestSyntheticGenerator:
    def test_deterministic_given_seed(self, tmp_path):
        spec = SyntheticSpec(seed=5, num_videos=2, snippets_min=8,
                             snippets_max=10)
        d1, d2 = tmp_path / "a", tmp_path / "b"
        generate_synthetic(spec, d1)
        generate_synthetic(spec, d2)
        assert ((d1 / "annotations.jsonl").read_bytes()
                == (d2 / "annotations.jsonl").read_bytes())
        for f in sorted((d1 / "features").iterdir()):
            assert f.read_bytes() == (d2 / "features" / f.name).read_bytes()

    def test_seed_changes_output(self, tmp_path):
        a = generate_synthetic(SyntheticSpec(seed=1, num_videos=1),
                               tmp_path / "a")
        b = generate_synthetic(SyntheticSpec(seed=2, num_videos=1),
                               tmp_path / "b")
        fa = read_features(tmp_path / "a" / "features" / f"{a[0].id}.ptfv")
        fb = read_features(tmp_path / "b" / "features" / f"{b[0].id}.ptfv")
        assert fa.shape != fb.shape or not np.array_equal(fa, fb)

    def test_layout_and_readability(self, tmp_path):
        spec = SyntheticSpec(seed=3, num_videos=3, snippets_min=6,
                             snippets_max=8)
        recs = generate_synthetic(spec, tmp_path)
        assert (tmp_path / "spec.json").exists()
        back = read_annotations(tmp_path / "annotations.jsonl")
        assert [r.id for r in back] == [r.id for r in recs]
        for r in back:
            feats = read_features(tmp_path / "features" / f"{r.id}.ptfv")
            assert feats.shape == (r.num_snippets, spec.grid, spec.grid,
                                   spec.feature_dim)
            assert r.segments and all(s.end <= r.duration + 1e-9
                                      for s in r.segments)
            assert all(len(bx) >= spec.subjects_min for bx in r.boxes)

    def test_global_average_is_constant_scene_vector(self, tmp_path):
        # the designed confound: spatial mean of every snippet is identical,
        # so global pooling carries no action information
        spec = SyntheticSpec(seed=4, num_videos=2, snippets_min=6,
                             snippets_max=8, noise=0.0)
        recs = generate_synthetic(spec, tmp_path)
        means = []
        for r in recs:
            feats = read_features(tmp_path / "features" / f"{r.id}.ptfv")
            means.append(feats.mean(axis=(1, 2)))
        ref = means[0][0]
        for m in means:
            # float32 storage rounds the exact cancellation
            assert np.abs(m - ref[None, :]).max() < 1e-5

    def test_subject_cells_carry_class_signal(self, tmp_path):
        spec = SyntheticSpec(seed=6, num_videos=1, num_classes=2,
                             snippets_min=10, snippets_max=10, noise=0.0)
        recs = generate_synthetic(spec, tmp_path)
        r = recs[0]
        feats = read_features(tmp_path / "features" / f"{r.id}.ptfv")
        sec = spec.snippet_stride / spec.fps
        cell = spec.frame_size // spec.grid
        # inside a segment every box region holds one fixed vector; its norm
        # is the class-signal norm (3), distinct from idle (1.5)
        seg = r.segments[0]
        t = int(round(seg.start / sec)) + 1
        assert seg.start <= t * sec <= seg.end
        box = r.boxes[t][0]
        r0, c0 = int(box.y1) // cell, int(box.x1) // cell
        vec = feats[t, r0, c0]
        np.testing.assert_allclose(np.linalg.norm(vec), 3.0, atol=1e-4)
        np.testing.assert_allclose(feats[t, r0 + 1, c0 + 1], vec, atol=1e-6)
