"""Decoding head outputs into scored segments and Soft-NMS suppression."""

from __future__ import annotations

from dataclasses import dataclass

import math

import numpy as np

from .heads import HeadOutput
from .subjects import VideoMeta


@dataclass(frozen=True)
class ActionSegment:
    class_id: int
    score: float
    start: float
    end: float

    def __post_init__(self):
        if not self.start < self.end:
            raise ValueError("segment start must precede end")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("score must lie in [0, 1]")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def decode(outs: HeadOutput, meta: VideoMeta, level_strides: list[int],
           score_threshold: float = 0.001,
           pre_nms_topk: int = 2000) -> list[ActionSegment]:
    """Every (level, step, class) whose sigmoid score clears the threshold
    becomes a candidate segment [(t - d_s) * u_l, (t + d_e) * u_l], clamped to
    the video extent; the top `pre_nms_topk` by score survive."""
    duration = meta.duration
    candidates = []
    for out, stride in zip(outs.levels, level_strides):
        unit = stride * meta.seconds_per_snippet
        scores = _sigmoid(out.class_logits.data)
        offs = out.offsets.data
        T_l, C = scores.shape
        for t in range(T_l):
            start = max((t - offs[t, 0]) * unit, 0.0)
            end = min((t + offs[t, 1]) * unit, duration)
            if not start < end:
                continue
            for c in range(C):
                s = scores[t, c]
                if s > score_threshold:
                    candidates.append(ActionSegment(c, float(s), start, end))
    candidates.sort(key=lambda a: (-a.score, a.start, a.class_id))
    return candidates[:pre_nms_topk]


def temporal_iou(a_start, a_end, b_start, b_end) -> float:
    inter = max(0.0, min(a_end, b_end) - max(a_start, b_start))
    union = (a_end - a_start) + (b_end - b_start) - inter
    return inter / union if union > 0 else 0.0


def soft_nms(segs: list[ActionSegment], sigma: float = 0.5,
             min_score: float = 0.001, per_class: bool = True) -> list[ActionSegment]:
    """Gaussian Soft-NMS: repeatedly pick the highest-scoring remaining
    segment and decay the rest by exp(-tIoU^2 / sigma); drop below min_score.

    Boundaries never change; scores never increase. Ties select the earlier
    start, then the lower class id.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    remaining = [(s.score, s) for s in segs]
    kept: list[ActionSegment] = []
    while remaining:
        best = min(range(len(remaining)),
                   key=lambda i: (-remaining[i][0], remaining[i][1].start,
                                  remaining[i][1].class_id))
        score, seg = remaining.pop(best)
        if score < min_score:
            continue
        kept.append(ActionSegment(seg.class_id, score, seg.start, seg.end))
        updated = []
        for s, other in remaining:
            if not per_class or other.class_id == seg.class_id:
                ov = temporal_iou(seg.start, seg.end, other.start, other.end)
                s = s * math.exp(-(ov * ov) / sigma)
            if s >= min_score:
                updated.append((s, other))
        remaining = updated
    return kept
