"""End-to-end network: subject tokens -> group token -> temporal pyramid ->
detection heads, plus a global-average-pooling ablation path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, concat
from .heads import DetectionHeads, HeadOutput
from .nn import Module
from .spatial_attention import AttentionConfig, GroupAggregator
from .subjects import VideoMeta, global_average, token_pool_matrix
from .temporal_pyramid import PyramidBuilder, PyramidConfig


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int
    num_classes: int
    K: int = 6
    group_layers: int = 8
    group_heads: int = 8
    temporal_heads: int = 4
    window_size: int = 9
    num_standard_layers: int = 2
    num_strided_layers: int = 5
    alpha: int = 2
    head_layers: int = 4
    use_subject_tokens: bool = True

    @property
    def pyramid_height(self) -> int:
        return 1 + self.num_strided_layers


@dataclass
class VideoSample:
    """Precomputed per-video inputs: pooled subject tokens and global
    averages, both plain arrays unless gradients w.r.t. features are needed."""
    video_id: str
    tokens: Tensor        # [T, K, D]
    valid: np.ndarray     # bool [T, K]
    global_avg: Tensor    # [T, D]
    meta: VideoMeta


def prepare_sample(video_id: str, features, boxes_per_snippet,
                   meta: VideoMeta, K: int,
                   bins: tuple[int, int] = (7, 7)) -> VideoSample:
    """Pool tokens for every snippet. `features` may be a numpy [T,H,W,D]
    array (training path, no feature gradients) or a Tensor (gradient checks).
    """
    T = meta.num_snippets
    HW = meta.feature_height * meta.feature_width
    is_tensor = isinstance(features, Tensor)
    mats = np.zeros((T, K, HW))
    valid = np.zeros((T, K), dtype=bool)
    for t in range(T):
        mats[t], valid[t] = token_pool_matrix(
            boxes_per_snippet[t], meta, K, bins)
    if is_tensor:
        flat = features.reshape(T, HW, meta.feature_dim)
        tokens = Tensor(mats) @ flat
        gavg = flat.mean(axis=1)
    else:
        flat = features.reshape(T, HW, meta.feature_dim)
        tokens = Tensor(mats @ flat)
        gavg = Tensor(flat.mean(axis=1))
    return VideoSample(video_id, tokens, valid, gavg, meta)


class SubjectPriorDetector(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.feature_dim
        self.aggregator = GroupAggregator(
            AttentionConfig(embed_dim=d, num_heads=cfg.group_heads,
                            num_layers=cfg.group_layers), rng)
        self.pyramid = PyramidBuilder(
            PyramidConfig(embed_dim=d, num_heads=cfg.temporal_heads,
                          window_size=cfg.window_size,
                          num_standard_layers=cfg.num_standard_layers,
                          num_strided_layers=cfg.num_strided_layers,
                          alpha=cfg.alpha), rng)
        self.heads = DetectionHeads(rng, d, cfg.num_classes, cfg.head_layers)

    def snippet_representation(self, sample: VideoSample) -> Tensor:
        """[T, D] sequence: aggregated group tokens, or plain global averages
        when the subject route is disabled."""
        if not self.cfg.use_subject_tokens:
            return sample.global_avg
        T = sample.tokens.shape[0]
        g0 = sample.global_avg.reshape(T, 1, -1)
        z0 = concat([sample.tokens, g0], axis=1)
        return self.aggregator(z0, sample.valid)

    def forward(self, sample: VideoSample) -> tuple[HeadOutput, list[int]]:
        g_seq = self.snippet_representation(sample)
        pyr = self.pyramid(g_seq)
        strides = [lv.stride for lv in pyr.levels]
        return self.heads(pyr), strides

    __call__ = forward

    def level_shapes(self, T: int) -> list[tuple[int, int]]:
        shapes, stride = [(T, 1)], 1
        for _ in range(self.cfg.num_strided_layers):
            T = -(-T // self.cfg.alpha)
            stride *= self.cfg.alpha
            shapes.append((T, stride))
        return shapes
