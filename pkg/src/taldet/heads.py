"""Classification/regression heads, target assignment, and the training loss.

Both heads are towers of four same-padded kernel-3 convolutions with ReLU,
shared across pyramid levels, plus a 1x1 projection: C sigmoid logits for the
classifier, two ReLU-clamped boundary offsets (start / end distance, in
level-local steps) for the regressor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, maximum, minimum
from .nn import ConvLayer, Module
from .temporal_pyramid import FeaturePyramid

FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25


@dataclass(frozen=True)
class GroundTruthSegment:
    class_id: int
    start: float
    end: float

    def __post_init__(self):
        if not self.start < self.end:
            raise ValueError("segment start must precede end")


@dataclass
class LevelTargets:
    class_target: np.ndarray   # int [T_l]; == num_classes for background
    d_start: np.ndarray        # float [T_l], level-local steps
    d_end: np.ndarray
    inside: np.ndarray         # bool [T_l]


@dataclass
class TargetMap:
    levels: list[LevelTargets]
    num_classes: int

    @property
    def num_positive(self) -> int:
        return int(sum(lv.inside.sum() for lv in self.levels))


@dataclass
class LevelOutput:
    class_logits: Tensor       # [T_l, C]
    offsets: Tensor            # [T_l, 2], nonnegative


@dataclass
class HeadOutput:
    levels: list[LevelOutput]


class DetectionHeads(Module):
    def __init__(self, rng, dim: int, num_classes: int, num_layers: int = 4):
        self.cls_tower = [ConvLayer(rng, 3, dim, dim, f"cls.{i}")
                          for i in range(num_layers)]
        self.reg_tower = [ConvLayer(rng, 3, dim, dim, f"reg.{i}")
                          for i in range(num_layers)]
        self.cls_out = ConvLayer(rng, 1, dim, num_classes, "cls.out")
        self.reg_out = ConvLayer(rng, 1, dim, 2, "reg.out")
        # start offsets positive so the clamping ReLU has gradient signal
        self.reg_out.b.data += 1.0

    def __call__(self, pyr: FeaturePyramid) -> HeadOutput:
        if not pyr.levels:
            raise ValueError("empty pyramid")
        outs = []
        for level in pyr.levels:
            c = r = level.features
            for layer in self.cls_tower:
                c = layer(c).relu()
            for layer in self.reg_tower:
                r = layer(r).relu()
            outs.append(LevelOutput(class_logits=self.cls_out(c),
                                    offsets=self.reg_out(r).relu()))
        return HeadOutput(outs)


def assign_targets(gts: list[GroundTruthSegment],
                   pyr_shapes: list[tuple[int, int]],
                   fps: float, snippet_stride: int,
                   num_classes: int) -> TargetMap:
    """Per-level step targets. `pyr_shapes` is [(T_l, stride_l), ...].

    A step inside several segments takes the one with minimal duration
    (ties: earlier start, then input order).
    """
    sec_per_snippet = snippet_stride / fps
    order = sorted(range(len(gts)),
                   key=lambda i: (gts[i].end - gts[i].start, gts[i].start, i))
    levels = []
    for T_l, stride_l in pyr_shapes:
        unit = stride_l * sec_per_snippet
        times = np.arange(T_l) * unit
        cls = np.full(T_l, num_classes, dtype=int)
        ds = np.zeros(T_l)
        de = np.zeros(T_l)
        inside = np.zeros(T_l, dtype=bool)
        for i in order:
            g = gts[i]
            hit = (~inside) & (times >= g.start) & (times <= g.end)
            cls[hit] = g.class_id
            ds[hit] = (times[hit] - g.start) / unit
            de[hit] = (g.end - times[hit]) / unit
            inside |= hit
        levels.append(LevelTargets(cls, ds, de, inside))
    return TargetMap(levels, num_classes)


def focal_loss(logits: Tensor, class_target: np.ndarray, inside: np.ndarray,
               strict_positive_only: bool = False) -> Tensor:
    """Sigmoid focal loss (gamma=2, alpha=0.25), one-vs-all over C classes,
    summed over steps. With strict_positive_only, only steps inside an action
    contribute; otherwise background steps add their negative-class terms."""
    T, C = logits.shape
    y = np.zeros((T, C))
    pos = class_target < C
    y[np.arange(T)[pos], class_target[pos]] = 1.0
    p = logits.sigmoid()
    # -log p = softplus(-x); -log(1-p) = softplus(x)
    pos_term = FOCAL_ALPHA * ((1.0 - p) ** FOCAL_GAMMA) * (-logits).softplus()
    neg_term = (1.0 - FOCAL_ALPHA) * (p ** FOCAL_GAMMA) * logits.softplus()
    per_entry = y * pos_term + (1.0 - y) * neg_term
    row_mask = inside if strict_positive_only else np.ones(T, dtype=bool)
    return (per_entry * row_mask.astype(np.float64)[:, None]).sum()


def giou_values(pred: Tensor, target: np.ndarray) -> Tensor:
    """Per-pair generalized IoU loss for offsets sharing the anchor step.

    pred[..., 2] = (d_start, d_end) >= 0. Since both intervals contain the
    anchor, the enclosing interval equals the union, so each value stays in
    [0, 1] (the general bound is 2).
    """
    target = np.asarray(target, dtype=np.float64)
    ps, pe = pred[..., 0], pred[..., 1]
    ts = Tensor(target[..., 0])
    te = Tensor(target[..., 1])
    inter = minimum(ps, ts) + minimum(pe, te)
    enclose = maximum(ps, ts) + maximum(pe, te)
    # both intervals contain the anchor, so their union spans max + max;
    # computing it that way (rather than |P| + |G| - inter) keeps iou exactly
    # 1 for identical pairs
    union = enclose
    iou = inter / union
    return (1.0 - iou) + (enclose - union) / enclose


def giou_loss_1d(pred: Tensor, target: np.ndarray) -> Tensor:
    """Summed generalized IoU loss; a single offset pair yields the scalar."""
    return giou_values(pred, target).sum()


def total_loss(outs: HeadOutput, targets: TargetMap, lam: float = 1.0,
               strict_positive_only: bool = False) -> Tensor:
    """Sum over levels and steps of (focal + lam * GIoU) / max(T+, 1),
    with T+ counted globally across levels."""
    norm = 1.0 / max(targets.num_positive, 1)
    parts = []
    for out, tgt in zip(outs.levels, targets.levels):
        parts.append(focal_loss(out.class_logits, tgt.class_target, tgt.inside,
                                strict_positive_only))
        if tgt.inside.any():
            pred_pos = out.offsets[tgt.inside.nonzero()[0]]
            tgt_pos = np.stack([tgt.d_start[tgt.inside],
                                tgt.d_end[tgt.inside]], axis=-1)
            parts.append(lam * giou_loss_1d(pred_pos, tgt_pos))
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total * norm
