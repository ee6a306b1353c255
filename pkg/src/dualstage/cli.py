"""Command-line entry point.

Subcommands: train, eval, predict, gradcheck, dataset-stats, synth.
Exit codes are a stable contract: 0 success, 1 runtime failure,
2 invalid input or configuration.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import checkpoint as ckpt_mod
from . import data as data_mod
from . import fusion, metrics, verify
from . import train as train_mod
from .config import load_run_config
from .errors import CheckpointError, ConfigError, DataError, DualStageError, MetricsError
from .gradcheck import perturb_params
from .tensor import Tensor

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_INVALID = 2

_INVALID_ERRORS = (ConfigError, DataError, CheckpointError, MetricsError)


def _resolve_root(run_cfg) -> str:
    if run_cfg.image_root is not None:
        return run_cfg.image_root
    return os.path.dirname(os.path.abspath(run_cfg.manifest))


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    samples = data_mod.load_manifest(run.manifest, run.vocabulary)
    model = fusion.build_model(
        run.vit, run.swin, run.vocabulary, seed=run.train.seed, dtype=run.train.dtype
    )
    os.makedirs(args.out, exist_ok=True)
    result = train_mod.train(
        model, samples, run.train, run.preprocess,
        image_root=_resolve_root(run), out_dir=args.out,
    )
    for epoch, mean_loss in result.loss_log:
        print(f"epoch {epoch}: mean_loss={mean_loss:.6f}")
    print(f"wrote {os.path.join(args.out, 'model.ckpt')}")
    return EXIT_OK


def cmd_eval(args) -> int:
    bundle = ckpt_mod.load_checkpoint(args.ckpt)
    samples = data_mod.load_manifest(args.manifest, bundle.model.vocabulary)
    preprocess = bundle.preprocess or data_mod.PreprocessConfig(
        target_size=bundle.model.vit_config.image_size
    )
    image_root = args.image_root or os.path.dirname(os.path.abspath(args.manifest))
    report = metrics.evaluate(
        bundle.model, samples, preprocess, image_root=image_root, batch_size=args.batch_size
    )
    report.write(args.out)
    print(f"accuracy={report.accuracy:.6f} over {report.num_samples} samples")
    print(f"wrote metrics.json, confusion_matrix.csv, pr_curve.csv, pr_curve.svg to {args.out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    bundle = ckpt_mod.load_checkpoint(args.ckpt)
    model = bundle.model
    preprocess = bundle.preprocess or data_mod.PreprocessConfig(
        target_size=model.vit_config.image_size
    )
    img = data_mod.decode_and_resize(args.image, preprocess.target_size)
    img = data_mod.normalize(img, preprocess)
    images = Tensor(img[None].astype(model.dtype))
    probs, labels = fusion.predict(fusion.forward(images, model))
    payload = {
        "image": args.image,
        "probabilities": {
            name: float(probs[0, i]) for i, name in enumerate(model.vocabulary)
        },
        "label": model.vocabulary[int(labels[0])],
        "label_index": int(labels[0]),
    }
    print(json.dumps(payload, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    run = load_run_config(args.config)
    # the check is only meaningful in float64, whatever the training precision
    model = fusion.build_model(run.vit, run.swin, run.vocabulary, seed=args.seed, dtype=np.float64)
    if args.freeze:
        model.set_trainable(args.freeze, False)
    perturb_params(model.named_parameters(), seed=args.seed)
    images, targets = verify.gradcheck_batch(model, args.seed)
    report = verify.full_model_grad_check(model, images, targets, step=args.step)
    worst_name, worst = report.worst()
    print(f"parameters checked: {len(report.per_param)} tensors, {report.scalars_checked} scalars")
    print(f"worst parameter: {worst_name} ({worst:.3e})")
    print(f"max relative error: {report.max_rel_error:.6e}")
    print(f"worst single scalar: {report.max_scalar_rel_error:.6e} (diagnostic)")
    if report.max_rel_error < args.tolerance:
        print(f"PASS (tolerance {args.tolerance:g})")
        return EXIT_OK
    print(f"FAIL (tolerance {args.tolerance:g})")
    return EXIT_RUNTIME


def cmd_dataset_stats(args) -> int:
    samples = data_mod.load_manifest(args.manifest, data_mod.DEFAULT_LABELS)
    counts = data_mod.class_distribution(samples, data_mod.DEFAULT_LABELS)
    data_mod.write_distribution(counts, args.out)
    for name, count in counts.items():
        print(f"{name},{count}")
    print(f"wrote class_distribution.csv and distribution.svg to {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    manifest, vocabulary = data_mod.generate_synthetic_dataset(
        args.out, args.classes, args.per_class, args.seed, image_size=args.image_size
    )
    print(f"wrote {args.classes * args.per_class} images and {manifest}")
    print(f"vocabulary: {','.join(vocabulary)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualstage",
        description="Dual-backbone (ViT + Swin) multi-label X-ray classifier toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON run config")
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--out", required=True, help="output directory for checkpoint and loss log")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--image-root", default=None)
    p.add_argument("--batch-size", type=int, default=32)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("predict", help="score one PNG and print per-label probabilities")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model backward pass")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--freeze", choices=["vit", "swin"], default=None,
                   help="freeze one backbone; frozen parameters are excluded")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("dataset-stats", help="class distribution report for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_dataset_stats)

    p = sub.add_parser("synth", help="generate a deterministic synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=32)
    p.set_defaults(fn=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except _INVALID_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except DualStageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
