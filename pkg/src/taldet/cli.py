"""Command-line entry points: synth / train / eval / infer / gradcheck.

Config files are plain `key = value` lines; any TrainConfig or model field
given on the command line overrides the file.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import dataio
from .checksuite import end_to_end_grad_check, primitive_grad_checks
from .dataio import (FormatError, SyntheticSpec, ValidationError,
                     generate_synthetic, read_annotations, read_checkpoint,
                     read_detections, read_features, write_detections)
from .metrics import THUMOS_GRID, evaluate
from .model import ModelConfig, SubjectPriorDetector, prepare_sample
from .postprocess import decode, soft_nms
from .training import (NumericalAbort, TrainConfig, fit, load_into_model)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


def parse_config_file(path) -> dict:
    """`key = value` lines; '#' starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = val
    return out


def _coerce(val: str):
    low = val.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(val)
        except ValueError:
            continue
    return val


def gather_settings(args) -> dict:
    settings = {}
    if args.config:
        settings.update({k: _coerce(v)
                         for k, v in parse_config_file(args.config).items()})
    overrides = {
        "seed": args.seed, "K": args.k, "group_layers": args.l1,
        "alpha": args.alpha, "lam": getattr(args, "lam", None),
        "ema_decay": args.ema_decay, "epochs": args.epochs,
        "warmup_epochs": args.warmup, "lr_init": args.lr,
        "strict_positive_only": args.strict_eq3,
    }
    settings.update({k: v for k, v in overrides.items() if v is not None})
    return settings


def load_dataset(data_dir):
    data_dir = Path(data_dir)
    records = read_annotations(data_dir / "annotations.jsonl")
    feats = {r.id: read_features(data_dir / "features" / f"{r.id}.ptfv")
             for r in records}
    return records, feats


def build_model_and_samples(records, feats, settings):
    any_feat = next(iter(feats.values()))
    num_classes = settings.get(
        "num_classes",
        1 + max((s.class_id for r in records for s in r.segments), default=0))
    model_cfg = ModelConfig(
        feature_dim=any_feat.shape[-1],
        num_classes=int(num_classes),
        K=int(settings.get("K", 6)),
        group_layers=int(settings.get("group_layers", 8)),
        group_heads=int(settings.get("group_heads", 8)),
        temporal_heads=int(settings.get("temporal_heads", 4)),
        window_size=int(settings.get("window_size", 9)),
        num_standard_layers=int(settings.get("num_standard_layers", 2)),
        num_strided_layers=int(settings.get("num_strided_layers", 5)),
        alpha=int(settings.get("alpha", 2)),
        use_subject_tokens=bool(settings.get("use_subject_tokens", True)),
    )
    rng = np.random.default_rng(int(settings.get("seed", 0)))
    model = SubjectPriorDetector(model_cfg, rng)
    samples = []
    for r in records:
        meta = r.meta(feats[r.id].shape)
        samples.append(prepare_sample(r.id, feats[r.id], r.boxes, meta,
                                      model_cfg.K))
    return model, samples


def cmd_synth(args):
    spec = SyntheticSpec(seed=args.seed if args.seed is not None else 0,
                         num_videos=args.videos, num_classes=args.classes,
                         noise=args.noise)
    generate_synthetic(spec, args.out)
    print(f"wrote {spec.num_videos} videos to {args.out}")
    return EXIT_OK


def cmd_train(args):
    settings = gather_settings(args)
    records, feats = load_dataset(args.data)
    model, samples = build_model_and_samples(records, feats, settings)
    train_cfg = TrainConfig(
        lr_init=float(settings.get("lr_init", 1e-4)),
        epochs=int(settings.get("epochs", 35)),
        warmup_epochs=int(settings.get("warmup_epochs", 5)),
        batch_size=int(settings.get("batch_size", 2)),
        ema_decay=float(settings.get("ema_decay", 0.999)),
        lam=float(settings.get("lam", 1.0)),
        weight_decay=float(settings.get("weight_decay", 0.0)),
        strict_positive_only=bool(settings.get("strict_positive_only", False)),
        seed=int(settings.get("seed", 0)),
    )
    segs = {r.id: r.segments for r in records}
    result = fit(model, samples, segs, train_cfg, out_dir=args.out)
    print(f"final loss {result.loss_log[-1]['mean_loss']:.6f}; "
          f"checkpoint at {result.checkpoint_path}")
    return EXIT_OK


def cmd_infer(args):
    settings = gather_settings(args)
    records, feats = load_dataset(args.data)
    model, samples = build_model_and_samples(records, feats, settings)
    load_into_model(model, read_checkpoint(args.checkpoint),
                    use_ema=args.ema)
    dets = {}
    keep = int(settings.get("post_nms_keep", 200))
    for r, sample in zip(records, samples):
        outs, strides = model(sample)
        cands = decode(outs, sample.meta, strides,
                       score_threshold=float(settings.get("score_threshold", 0.001)),
                       pre_nms_topk=int(settings.get("pre_nms_topk", 2000)))
        dets[r.id] = soft_nms(cands,
                              sigma=float(settings.get("sigma", 0.5)))[:keep]
    out_path = Path(args.out) / "detections.jsonl"
    Path(args.out).mkdir(parents=True, exist_ok=True)
    write_detections(out_path, dets)
    print(f"wrote detections for {len(dets)} videos to {out_path}")
    return EXIT_OK


def cmd_eval(args):
    records = read_annotations(Path(args.data) / "annotations.jsonl")
    dets = read_detections(args.detections)
    gts = {r.id: r.segments for r in records}
    report = evaluate(dets, gts, thresholds=args.thresholds or THUMOS_GRID)
    print(report.table())
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        with open(Path(args.out) / "report.jsonl", "w") as fh:
            for thr, v in sorted(report.per_threshold_map.items()):
                fh.write(json.dumps({"tiou": thr, "map": v}) + "\n")
            fh.write(json.dumps({"average_map": report.average_map}) + "\n")
    return EXIT_OK


def cmd_gradcheck(args):
    prims = primitive_grad_checks(seed=args.seed or 0)
    ok = True
    for name, err in prims.items():
        status = "ok" if err < 1e-6 else "FAIL"
        ok &= err < 1e-6
        print(f"{name:<18} max rel err {err:.3e}  [{status}]")
    e2e = end_to_end_grad_check(seed=args.seed or 0)
    status = "ok" if e2e < 1e-4 else "FAIL"
    ok &= e2e < 1e-4
    print(f"{'end_to_end_loss':<18} max rel err {e2e:.3e}  [{status}]")
    return EXIT_OK if ok else EXIT_NUMERICAL


def _add_common(p):
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="out")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--l1", type=int, default=None)
    p.add_argument("--alpha", type=int, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--ema-decay", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--strict-eq3", type=lambda s: s.lower() == "true",
                   default=None)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="taldet")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--videos", type=int, default=8)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--noise", type=float, default=0.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--data", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="decode detections from a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ema", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score detections against annotations")
    p.add_argument("--data", required=True)
    p.add_argument("--detections", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--thresholds", type=float, nargs="*", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, FormatError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalAbort as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
