"""Command-line entry point: ``decaps synth|train|eval|ham``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import ConfigError, RunConfig, build_run_config, load_run_config, parse_pairs
from .dataio import DatasetError, load_image, synth_generate
from .pnm import PnmError
from .tensor import ShapeError
from .train import (TrainingDiverged, best_checkpoints, evaluate_predictions, load_run_dataset,
                    predict_samples, render_ham, train, write_ham_images)

MODES = ("coarse", "fine", "distilled")


def _run_config(args) -> RunConfig:
    pairs: dict[str, object] = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            pairs.update(parse_pairs(path.read_text(), str(path)))
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from None
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    overrides = {
        "data_root": getattr(args, "data", None),
        "epochs": getattr(args, "epochs", None),
        "out_dir": getattr(args, "out", None),
        "routing": getattr(args, "routing", None),
        "seed": getattr(args, "seed", None),
    }
    pairs.update({k: v for k, v in overrides.items() if v is not None})
    if getattr(args, "no_peekaboo", False):
        pairs["peekaboo"] = False
    if getattr(args, "no_augment", False):
        pairs["augment"] = False
    return build_run_config(pairs)


def cmd_synth(args) -> int:
    root = synth_generate(args.out, n_train=args.n_train, n_test=args.n_test, size=args.size, seed=args.seed)
    print(f"wrote synthetic dataset to {root}")
    return 0


def cmd_train(args) -> int:
    run = _run_config(args)
    if not run.data_root:
        raise ConfigError("data_root is not set (use --data or the config file)")
    result = train(run)
    last = result.history[-1] if result.history else None
    if last is not None:
        print(f"trained {len(result.history)} epochs; final val_accuracy={last.val_accuracy!r}")
    print(f"run directory: {run.out_dir}")
    return 0


def _write_report(report, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.txt").write_text(report.to_text())
    (out / "counts.txt").write_text(report.counts_text())
    (out / "roc.csv").write_text(report.roc_csv())


def cmd_eval(args) -> int:
    run = _run_config(args)
    if args.checkpoint:
        paths = [Path(p) for p in args.checkpoint]
    elif args.run_dir:
        paths = best_checkpoints(args.run_dir, args.best)
    else:
        raise ConfigError("eval needs --checkpoint or --run-dir")
    data = load_run_dataset(run)
    out = Path(args.out or Path(run.out_dir) / f"eval_{args.mode}")
    reports = []
    for path in paths:
        ckpt = checkpoint.load(path, expected=run.model)
        preds, labels = predict_samples(ckpt.model, data.test)
        report = evaluate_predictions(preds, labels, args.mode, run.positive_class)
        reports.append(report)
        _write_report(report, out if len(paths) == 1 else out / path.stem)
    if len(reports) > 1:
        table = np.array([[r.as_dict()[k] for k in r.as_dict()] for r in reports])
        names = list(reports[0].as_dict())
        lines = [f"{k}={float(m)!r} std={float(s)!r}" for k, m, s in zip(names, table.mean(0), table.std(0))]
        (out / "summary.txt").write_text("\n".join(lines) + "\n")
        print("\n".join(lines))
    else:
        print(reports[0].to_text(), end="")
    return 0


def cmd_ham(args) -> int:
    expected = _run_config(args).model if args.config else None
    ckpt = checkpoint.load(args.checkpoint, expected=expected)
    model = ckpt.model
    for image_path in args.image:
        image = load_image(image_path, model.cfg.input_size)
        render = render_ham(model, image)
        if render.box is None:
            print(f"warning: {image_path}: empty ROI, overlay drawn without a box", file=sys.stderr)
        image_path = Path(image_path)
        paths = write_ham_images(render, args.out, f"{image_path.parent.name}_{image_path.stem}")
        print(f"{image_path}: class {render.predicted} -> {', '.join(str(p) for p in paths)}")
    return 0


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run config file (key = value lines)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--data", help="dataset root directory")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="decaps", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic two-class dataset")
    p.add_argument("--out", required=True, help="dataset directory to create")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--n-train", type=int, default=400, help="training images per class")
    p.add_argument("--n-test", type=int, default=100, help="test images per class")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model, one checkpoint per epoch")
    _add_run_options(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", help="run output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--routing", choices=("idr", "baseline"))
    p.add_argument("--no-peekaboo", action="store_true", help="coarse-only loss")
    p.add_argument("--no-augment", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate checkpoints on the test split")
    _add_run_options(p)
    p.add_argument("--checkpoint", nargs="+", help="checkpoint file(s)")
    p.add_argument("--run-dir", help="pick the best checkpoints of a training run by validation accuracy")
    p.add_argument("--best", type=int, default=5, help="checkpoints to pick with --run-dir")
    p.add_argument("--mode", choices=MODES, default="distilled")
    p.add_argument("--out", help="report directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ham", help="render head activation maps for images")
    _add_run_options(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", nargs="+", required=True, help="P5 input image(s)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_ham)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetError, checkpoint.CheckpointError, PnmError, ShapeError,
            TrainingDiverged, ValueError, OSError) as exc:
        print(f"decaps {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
