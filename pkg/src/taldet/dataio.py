"""File formats (features, annotations, detections, checkpoints) and the
seeded synthetic dataset generator.

Binary formats share one header discipline: 4-byte magic, little-endian u32
version, then u32 dimensions, then a float32 payload. Annotations and
detections are line-delimited JSON records so fixtures diff cleanly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .heads import GroundTruthSegment
from .postprocess import ActionSegment
from .subjects import SubjectBox, VideoMeta

FEATURE_MAGIC = b"PTFV"
CHECKPOINT_MAGIC = b"PTCK"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """Malformed binary or record file."""


class ValidationError(ValueError):
    """Well-formed file with invalid content."""


# -- feature files -----------------------------------------------------------


def write_features(path, payload: np.ndarray) -> None:
    """payload: [T, H, W, D] floats, stored as float32 row-major."""
    arr = np.ascontiguousarray(payload, dtype=np.float32)
    if arr.ndim != 4:
        raise ValidationError("feature payload must be T x H x W x D")
    if not np.isfinite(arr).all():
        raise ValidationError("feature payload contains non-finite values")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<5I", FORMAT_VERSION, *arr.shape))
        fh.write(arr.tobytes())


def read_features(path) -> np.ndarray:
    """Returns the [T, H, W, D] grid promoted to float64."""
    raw = Path(path).read_bytes()
    if len(raw) < 24:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    if raw[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r} at offset 0")
    version, T, H, W, D = struct.unpack("<5I", raw[4:24])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    expected = 24 + 4 * T * H * W * D
    if len(raw) != expected:
        raise FormatError(
            f"{path}: expected {expected} bytes, found {len(raw)}")
    arr = np.frombuffer(raw[24:], dtype="<f4").reshape(T, H, W, D)
    if not np.isfinite(arr).all():
        raise FormatError(f"{path}: non-finite payload")
    return arr.astype(np.float64)


# -- annotations -------------------------------------------------------------

_ANNOTATION_FIELDS = {"id", "fps", "frame_width", "frame_height",
                      "snippet_stride", "segments", "boxes"}


@dataclass
class AnnotationRecord:
    id: str
    fps: float
    frame_width: int
    frame_height: int
    snippet_stride: int
    segments: list[GroundTruthSegment]
    boxes: list[list[SubjectBox]]   # one list per snippet

    @property
    def num_snippets(self) -> int:
        return len(self.boxes)

    def meta(self, feature_shape) -> VideoMeta:
        _, H, W, D = feature_shape
        return VideoMeta(self.frame_width, self.frame_height, self.fps,
                         self.num_snippets, H, W, D, self.snippet_stride)

    @property
    def duration(self) -> float:
        return self.num_snippets * self.snippet_stride / self.fps


def write_annotations(path, records: list[AnnotationRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            obj = {
                "id": r.id,
                "fps": r.fps,
                "frame_width": r.frame_width,
                "frame_height": r.frame_height,
                "snippet_stride": r.snippet_stride,
                # coordinates serialize as floats so write -> read -> write
                # reproduces the bytes even when records hold ints
                "segments": [[int(s.class_id), float(s.start), float(s.end)]
                             for s in r.segments],
                "boxes": [[[float(b.x1), float(b.y1), float(b.x2),
                            float(b.y2), float(b.confidence)]
                           for b in snippet] for snippet in r.boxes],
            }
            fh.write(json.dumps(obj) + "\n")


def read_annotations(path) -> list[AnnotationRecord]:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}:{lineno}: invalid record: {e}")
            unknown = set(obj) - _ANNOTATION_FIELDS
            if unknown:
                raise ValidationError(
                    f"{path}:{lineno}: unknown fields {sorted(unknown)}")
            missing = _ANNOTATION_FIELDS - set(obj)
            if missing:
                raise ValidationError(
                    f"{path}:{lineno}: missing fields {sorted(missing)}")
            rid = obj["id"]
            try:
                segments = [GroundTruthSegment(int(c), float(s), float(e))
                            for c, s, e in obj["segments"]]
            except ValueError as e:
                raise ValidationError(f"record {rid}: {e}")
            boxes = [[SubjectBox(*map(float, b)) for b in snippet]
                     for snippet in obj["boxes"]]
            rec = AnnotationRecord(rid, float(obj["fps"]),
                                   int(obj["frame_width"]),
                                   int(obj["frame_height"]),
                                   int(obj["snippet_stride"]),
                                   segments, boxes)
            for s in segments:
                if s.start < 0 or s.end > rec.duration + 1e-9:
                    raise ValidationError(
                        f"record {rid}: segment [{s.start}, {s.end}] outside "
                        f"video extent {rec.duration:.3f}s")
            records.append(rec)
    return records


# -- detections --------------------------------------------------------------


def write_detections(path, dets_by_video: dict[str, list[ActionSegment]]) -> None:
    with open(path, "w") as fh:
        for vid in sorted(dets_by_video):
            for d in dets_by_video[vid]:
                fh.write(json.dumps({"video_id": vid, "class_id": d.class_id,
                                     "score": d.score, "start": d.start,
                                     "end": d.end}) + "\n")


def read_detections(path) -> dict[str, list[ActionSegment]]:
    out: dict[str, list[ActionSegment]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            expected = {"video_id", "class_id", "score", "start", "end"}
            if set(obj) != expected:
                raise ValidationError(f"{path}:{lineno}: bad detection fields")
            out.setdefault(obj["video_id"], []).append(
                ActionSegment(int(obj["class_id"]), float(obj["score"]),
                              float(obj["start"]), float(obj["end"])))
    return out


# -- checkpoints -------------------------------------------------------------


def write_checkpoint(path, named_arrays: list[tuple[str, np.ndarray]]) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<2I", FORMAT_VERSION, len(named_arrays)))
        for name, arr in named_arrays:
            arr32 = np.ascontiguousarray(arr, dtype=np.float32)
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr32.ndim))
            fh.write(struct.pack(f"<{arr32.ndim}I", *arr32.shape))
            fh.write(arr32.tobytes())


def read_checkpoint(path) -> list[tuple[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint header")
    version, count = struct.unpack("<2I", raw[4:12])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 12
    out = []
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, off); off += 4
            name = raw[off:off + nlen].decode("utf-8"); off += nlen
            (ndim,) = struct.unpack_from("<I", raw, off); off += 4
            shape = struct.unpack_from(f"<{ndim}I", raw, off); off += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off)
            off += 4 * n
            out.append((name, arr.reshape(shape).astype(np.float64)))
    except struct.error:
        raise FormatError(f"{path}: truncated checkpoint at offset {off}")
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    return out


# -- synthetic dataset -------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    seed: int
    num_videos: int = 8
    num_classes: int = 2
    snippets_min: int = 28
    snippets_max: int = 36
    subjects_min: int = 1
    subjects_max: int = 3
    noise: float = 0.0
    grid: int = 4
    feature_dim: int = 16
    frame_size: int = 64
    fps: float = 15.0
    snippet_stride: int = 4

    def to_json(self) -> str:
        return json.dumps(vars(self) | {}, sort_keys=True)


def generate_synthetic(spec: SyntheticSpec, out_dir) -> list[AnnotationRecord]:
    """Write a deterministic dataset where subject-box cells carry a clean
    class signal while background cells carry a randomly chosen class-shaped
    distractor, so subject pooling is informative and global pooling is
    confounded. Layout: <out>/annotations.jsonl, <out>/features/<id>.ptfv.
    """
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    G, D, C = spec.grid, spec.feature_dim, spec.num_classes
    cell_px = spec.frame_size / G

    signals = rng.normal(size=(C, D))
    signals *= 3.0 / np.linalg.norm(signals, axis=1, keepdims=True)
    idle = rng.normal(size=D)
    idle *= 1.5 / np.linalg.norm(idle)
    scene = rng.normal(size=D)
    scene *= 1.0 / np.linalg.norm(scene)

    records = []
    for v in range(spec.num_videos):
        T = int(rng.integers(spec.snippets_min, spec.snippets_max + 1))
        sec_per_snippet = spec.snippet_stride / spec.fps
        # 1-2 non-overlapping segments in snippet units
        n_seg = int(rng.integers(1, 3))
        spans, cursor = [], 2
        for _ in range(n_seg):
            length = int(rng.integers(6, 13))
            start = cursor + int(rng.integers(0, 4))
            if start + length > T - 2:
                break
            spans.append((start, start + length, int(rng.integers(0, C))))
            cursor = start + length + 3
        if not spans:
            spans = [(2, min(T - 2, 10), int(rng.integers(0, C)))]
        segments = [GroundTruthSegment(c, s * sec_per_snippet, e * sec_per_snippet)
                    for s, e, c in spans]

        feats = np.zeros((T, G, G, D), dtype=np.float64)
        boxes: list[list[SubjectBox]] = []
        for t in range(T):
            active = next((c for s, e, c in spans if s <= t <= e), None)
            n_boxes = int(rng.integers(spec.subjects_min, spec.subjects_max + 1))
            snippet_boxes = []
            content = idle if active is None else signals[active]
            covered = np.zeros((G, G), dtype=bool)
            for _ in range(n_boxes):
                r0 = int(rng.integers(0, G - 1))
                c0 = int(rng.integers(0, G - 1))
                covered[r0:r0 + 2, c0:c0 + 2] = True
                feats[t, r0:r0 + 2, c0:c0 + 2] = content
                snippet_boxes.append(SubjectBox(
                    c0 * cell_px, r0 * cell_px,
                    (c0 + 2) * cell_px, (r0 + 2) * cell_px,
                    confidence=round(float(rng.uniform(0.5, 1.0)), 4)))
            # background exactly cancels the subjects' contribution, so the
            # global spatial average is the same scene vector in every
            # snippet: only subject-region pooling carries the action signal
            n_bg = G * G - int(covered.sum())
            bg_fill = (G * G * scene - covered.sum() * content) / n_bg
            feats[t][~covered] = bg_fill
            feats[t][~covered] += spec.noise * rng.normal(size=(n_bg, D))
            boxes.append(snippet_boxes)

        vid = f"synth_{v:03d}"
        write_features(out / "features" / f"{vid}.ptfv", feats)
        records.append(AnnotationRecord(vid, spec.fps, spec.frame_size,
                                        spec.frame_size, spec.snippet_stride,
                                        segments, boxes))
    write_annotations(out / "annotations.jsonl", records)
    (out / "spec.json").write_text(spec.to_json() + "\n")
    return records
