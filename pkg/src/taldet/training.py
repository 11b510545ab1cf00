"""Adam training loop with linear warm-up, cosine annealing, and EMA weights."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import NonFiniteError, Parameter
from .dataio import write_checkpoint
from .heads import assign_targets, total_loss
from .model import SubjectPriorDetector, VideoSample


class NumericalAbort(RuntimeError):
    """Training hit a non-finite loss; carries step diagnostics."""


@dataclass(frozen=True)
class TrainConfig:
    lr_init: float = 1e-4
    epochs: int = 35
    warmup_epochs: int = 5
    batch_size: int = 2
    ema_decay: float = 0.999
    lam: float = 1.0
    grad_clip: float = 1.0
    weight_decay: float = 0.0
    strict_positive_only: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must be < epochs")
        if self.batch_size < 1 or self.lr_init < 0:
            raise ValueError("invalid training configuration")


def lr_schedule(step: int, total_steps: int, warmup_steps: int,
                lr_init: float) -> float:
    """Linear warm-up to lr_init, then cosine annealing to 0."""
    if not 0 <= step <= total_steps:
        raise ValueError("step out of range")
    if warmup_steps > 0 and step < warmup_steps:
        return lr_init * step / warmup_steps
    denom = max(total_steps - warmup_steps, 1)
    progress = (step - warmup_steps) / denom
    return lr_init * 0.5 * (1.0 + math.cos(math.pi * progress))


class Adam:
    """Reference Adam update with bias correction."""

    def __init__(self, params: list[Parameter], beta1=0.9, beta2=0.999,
                 eps=1e-8, weight_decay=0.0):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_global_norm(params: list[Parameter], max_norm: float) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def ema_update(ema: list[np.ndarray], params: list[Parameter],
               decay: float) -> None:
    if len(ema) != len(params):
        raise ValueError("parameter list mismatch")
    for e, p in zip(ema, params):
        if e.shape != p.data.shape:
            raise ValueError("parameter shape mismatch")
        e *= decay
        e += (1 - decay) * p.data


@dataclass
class FitResult:
    loss_log: list[dict] = field(default_factory=list)
    checkpoint_path: Path | None = None


def video_loss(model: SubjectPriorDetector, sample: VideoSample,
               gts: list, cfg: TrainConfig):
    outs, strides = model(sample)
    shapes = [(o.class_logits.shape[0], s)
              for o, s in zip(outs.levels, strides)]
    targets = assign_targets(gts, shapes, sample.meta.fps,
                             sample.meta.snippet_stride,
                             model.cfg.num_classes)
    return total_loss(outs, targets, lam=cfg.lam,
                      strict_positive_only=cfg.strict_positive_only)


def fit(model: SubjectPriorDetector, samples: list[VideoSample],
        segments_by_video: dict[str, list], cfg: TrainConfig,
        out_dir=None, log_every: int = 1) -> FitResult:
    """Deterministic training: fixed shuffle order per epoch, sequential
    per-video gradient accumulation within a batch, one Adam step per batch.
    """
    if not samples:
        raise ValueError("empty training set")
    params = model.parameters()
    opt = Adam(params, weight_decay=cfg.weight_decay)
    ema = [p.data.copy() for p in params]
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(len(samples) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    result = FitResult()
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        epoch_losses = []
        for b in range(steps_per_epoch):
            batch = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            model.zero_grad()
            lr = lr_schedule(step, total_steps, warmup_steps, cfg.lr_init)
            batch_loss = 0.0
            for i in batch:
                sample = samples[i]
                gts = segments_by_video[sample.video_id]
                try:
                    loss = video_loss(model, sample, gts, cfg) * (1.0 / len(batch))
                except NonFiniteError as e:
                    grad_norms = {p.name: float(np.abs(p.grad).max())
                                  for p in params if p.grad is not None}
                    raise NumericalAbort(
                        f"non-finite loss at step {step} (lr={lr:.3g}): {e}; "
                        f"largest grads: {sorted(grad_norms.values())[-3:]}")
                loss.backward()
                batch_loss += float(loss.data)
            clip_global_norm(params, cfg.grad_clip)
            opt.step(lr)
            ema_update(ema, params, cfg.ema_decay)
            epoch_losses.append(batch_loss)
            step += 1
        if (epoch + 1) % log_every == 0 or epoch == cfg.epochs - 1:
            result.loss_log.append({
                "epoch": epoch,
                "mean_loss": float(np.mean(epoch_losses)),
                "lr": lr_schedule(step, total_steps, warmup_steps, cfg.lr_init),
            })
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        named = [(name, p.data) for name, p in model.named_parameters()]
        named += [("ema/" + name, e) for (name, _), e in
                  zip(model.named_parameters(), ema)]
        result.checkpoint_path = out / "checkpoint.ptck"
        write_checkpoint(result.checkpoint_path, named)
        with open(out / "loss_log.jsonl", "w") as fh:
            for row in result.loss_log:
                fh.write(json.dumps(row) + "\n")
    return result


def load_into_model(model: SubjectPriorDetector,
                    entries: list[tuple[str, np.ndarray]],
                    use_ema: bool = False) -> None:
    prefix = "ema/" if use_ema else ""
    table = {name: arr for name, arr in entries
             if name.startswith(prefix) and (prefix or not name.startswith("ema/"))}
    for name, p in model.named_parameters():
        key = prefix + name
        if key not in table:
            raise ValueError(f"checkpoint missing parameter {key}")
        if table[key].shape != p.data.shape:
            raise ValueError(f"shape mismatch for {key}")
        p.data = table[key].copy()
