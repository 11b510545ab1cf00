"""Finite-difference verification suite for primitives and the full loss."""

from __future__ import annotations

import numpy as np

from .autograd import (Parameter, Tensor, conv1d, depthwise_conv1d,
                       grad_check, layer_norm, linear, softmax)
from .heads import GroundTruthSegment
from .model import ModelConfig, SubjectPriorDetector, VideoSample, prepare_sample
from .subjects import SubjectBox, VideoMeta
from .training import TrainConfig, video_loss


def primitive_grad_checks(probes: int = 20, h: float = 1e-5,
                          seed: int = 0) -> dict[str, float]:
    """Max relative error per primitive over `probes` random probe points."""
    rng = np.random.default_rng(seed)
    results = {}

    def run(name, make):
        worst = 0.0
        for _ in range(probes):
            f, params = make()
            worst = max(worst, grad_check(f, params, h=h, rng=rng))
        results[name] = worst

    def make_linear():
        x = Parameter(rng.normal(size=(3, 4)), "x")
        w = Parameter(rng.normal(size=(4, 2)), "w")
        b = Parameter(rng.normal(size=2), "b")
        return lambda: (linear(x, w, b) ** 2.0).sum(), [x, w, b]

    def make_softmax():
        x = Parameter(rng.normal(size=(3, 5)), "x")
        mask = rng.random((3, 5)) > 0.3
        mask[:, 0] = True
        c = rng.normal(size=(3, 5))
        return lambda: (softmax(x, mask=mask) * c).sum(), [x]

    def make_layer_norm():
        x = Parameter(rng.normal(size=(2, 6)), "x")
        g = Parameter(rng.normal(size=6), "g")
        b = Parameter(rng.normal(size=6), "b")
        c = rng.normal(size=(2, 6))
        return lambda: (layer_norm(x, g, b, eps=1e-5) * c).sum(), [x, g, b]

    def make_conv():
        x = Parameter(rng.normal(size=(6, 3)), "x")
        w = Parameter(rng.normal(size=(3, 3, 2)), "w")
        b = Parameter(rng.normal(size=2), "b")
        stride = int(rng.integers(1, 3))
        return lambda: (conv1d(x, w, b, stride=stride) ** 2.0).sum(), [x, w, b]

    def make_depthwise():
        x = Parameter(rng.normal(size=(7, 4)), "x")
        w = Parameter(rng.normal(size=(2, 4)), "w")
        return lambda: (depthwise_conv1d(x, w, 2) ** 2.0).sum(), [x, w]

    def make_relu():
        x = Parameter(rng.normal(size=(4, 4)) + 0.1, "x")
        c = rng.normal(size=(4, 4))
        return lambda: (x.relu() * c).sum(), [x]

    run("linear", make_linear)
    run("softmax", make_softmax)
    run("layer_norm", make_layer_norm)
    run("conv1d", make_conv)
    run("depthwise_conv1d", make_depthwise)
    run("relu", make_relu)
    return results


def build_toy_problem(seed: int = 0, T: int = 2, K: int = 3,
                      group_layers: int = 2, num_strided: int = 2,
                      feature_dim: int = 8):
    """Tiny end-to-end setup with the feature grid as a trainable input, so
    the check covers RoI pooling as well as every network parameter."""
    rng = np.random.default_rng(seed)
    meta = VideoMeta(frame_width=32, frame_height=32, fps=10.0,
                     num_snippets=T, feature_height=2, feature_width=2,
                     feature_dim=feature_dim, snippet_stride=5)
    cfg = ModelConfig(feature_dim=feature_dim, num_classes=2, K=K,
                      group_layers=group_layers, group_heads=2,
                      temporal_heads=2, window_size=3,
                      num_standard_layers=1, num_strided_layers=num_strided,
                      head_layers=2)
    model = SubjectPriorDetector(cfg, rng)
    feats = Parameter(rng.normal(size=(T, 2, 2, feature_dim)), "features")
    boxes = [[SubjectBox(2.0, 2.0, 20.0, 20.0, 0.9),
              SubjectBox(10.0, 8.0, 30.0, 28.0, 0.8)]
             for _ in range(T)]
    gts = [GroundTruthSegment(0, 0.0, meta.duration * 0.8)]
    train_cfg = TrainConfig(epochs=2, warmup_epochs=1)

    def loss_fn():
        sample = prepare_sample("toy", feats, boxes, meta, K)
        return video_loss(model, sample, gts, train_cfg)

    params = [feats] + model.parameters()
    return loss_fn, params


def end_to_end_grad_check(seed: int = 0, h: float = 1e-5,
                          max_coords: int = 3, **toy_kwargs) -> float:
    loss_fn, params = build_toy_problem(seed=seed, **toy_kwargs)
    rng = np.random.default_rng(seed + 1)
    return grad_check(loss_fn, params, h=h, max_coords=max_coords, rng=rng)
