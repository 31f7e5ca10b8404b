"""Command-line entry point: ``thermoloc preprocess|train|eval|ablate|synth``.

Exit codes: 0 success, 2 validation error, 3 training divergence.
"""

import argparse
import logging
import sys
from pathlib import Path

import yaml

from thermoloc.config import TrainConfig, load_config, save_config, with_overrides
from thermoloc.data import load_dataset, split_dataset, write_synthetic_dataset
from thermoloc.errors import TrainingDivergenceError, ValidationError
from thermoloc.preproc import PreprocessConfig, preprocess_tree
from thermoloc.train import (
    ablate,
    evaluate_checkpoint,
    load_grid,
    train,
    write_evaluation,
)
from thermoloc.model import ThermalLocNet

EXIT_VALIDATION = 2
EXIT_DIVERGED = 3

log = logging.getLogger("thermoloc")


def _config(args):
    cfg = load_config(args.config) if args.config else TrainConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    return with_overrides(cfg, overrides) if overrides else cfg


def _select(sequences, split):
    if split == "all":
        return sequences
    parts = split_dataset(sequences)
    return parts.train_sequences if split == "train" else parts.test_sequences


def cmd_preprocess(args):
    cfg = PreprocessConfig(a=args.a, b=args.b, h=args.h, sigma=args.sigma,
                           kernel_size=args.kernel_size)
    count = preprocess_tree(args.input, args.out, cfg)
    print(f"processed {count} images into {args.out}")


def cmd_synth(args):
    write_synthetic_dataset(args.out, args.seed or 0, args.frames, tuple(args.size),
                            holdout_every=args.holdout_every, scene=args.scene)
    print(f"wrote {args.frames} frames to {args.out}")


def describe(cfg):
    model = ThermalLocNet(cfg.model)
    lines = [f"{name:<28} {shape}" for name, shape in model.describe()]
    return "\n".join(lines)


def cmd_train(args):
    cfg = _config(args)
    if args.describe:
        print(describe(cfg))
        return
    if not args.dataset or not args.out:
        raise ValidationError("train requires --dataset and --out")
    sequences = _select(load_dataset(args.dataset), args.split)
    if not sequences:
        raise ValidationError(f"no sequences in the {args.split!r} split")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    result = train(cfg, sequences, out_dir=out, apply_preprocess=not args.no_preprocess)
    print(f"final loss {result.loss_curve[-1]:.6f}; checkpoint {result.checkpoint}")


def cmd_eval(args):
    sequences = _select(load_dataset(args.dataset), args.split)
    if not sequences:
        raise ValidationError(f"no sequences in the {args.split!r} split")
    evaluation = evaluate_checkpoint(args.checkpoint, sequences,
                                     apply_preprocess=not args.no_preprocess)
    paths = write_evaluation(evaluation, args.out)
    avg = evaluation.report.average
    print(f"median {avg.median_pos_m:.3f} m, {avg.median_rot_deg:.3f} deg; "
          f"mean {avg.mean_pos_m:.3f} m, {avg.mean_rot_deg:.3f} deg -> {paths[0]}")


def cmd_ablate(args):
    cfg = _config(args)
    grid_arg = args.grid
    if Path(grid_arg).is_file():
        loaded = yaml.safe_load(Path(grid_arg).read_text())
        grid_arg = loaded["variants"] if isinstance(loaded, dict) else loaded
    grid = load_grid(grid_arg)
    parts = split_dataset(load_dataset(args.dataset))
    if not parts.train_sequences or not parts.test_sequences:
        raise ValidationError("ablation needs both train and test sequences")
    rows = ablate(cfg, grid, parts.train_sequences, parts.test_sequences, out_dir=args.out,
                  apply_preprocess=not args.no_preprocess)
    for row in rows:
        status = row.error or f"{row.mean_pos_m:.3f} m, {row.mean_rot_deg:.3f} deg"
        print(f"{row.name:<16} {status}")


def build_parser():
    parser = argparse.ArgumentParser(prog="thermoloc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, dataset=True):
        p.add_argument("--config", help="YAML/JSON config file")
        if dataset:
            p.add_argument("--dataset", help="dataset root (<scene>/<sequence>/poses.txt)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--no-preprocess", action="store_true",
                       help="images are already enhanced; skip the preprocessing step")

    p = sub.add_parser("preprocess", help="enhance a directory tree of PNG frames")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--a", type=float, default=1.2, help="contrast gain")
    p.add_argument("--b", type=float, default=10.0, help="brightness offset")
    p.add_argument("--h", type=float, default=1.0, help="sharpening intensity")
    p.add_argument("--sigma", type=float, default=2.0, help="Gaussian std-dev in pixels")
    p.add_argument("--kernel-size", type=int, default=None)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth", help="write a synthetic pose-annotated scene")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=50)
    p.add_argument("--size", type=int, nargs=2, default=[64, 64], metavar=("H", "W"))
    p.add_argument("--holdout-every", type=int, default=None,
                   help="put every k-th frame into a second (test) sequence")
    p.add_argument("--scene", default="synth")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--split", choices=["train", "test", "all"], default="train")
    p.add_argument("--describe", action="store_true", help="print the shape table and exit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["train", "test", "all"], default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train/evaluate a grid of variants")
    common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--grid", default="depth", help="'depth', 'bridge' or a YAML grid file")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    for name in ("dataset", "out"):
        if args.command in ("eval", "ablate") and not getattr(args, name, None):
            parser.error(f"{args.command} requires --{name}")
    try:
        args.func(args)
    except TrainingDivergenceError as exc:
        log.error("%s", exc)
        if exc.checkpoint is not None:
            log.error("last good checkpoint: %s", exc.checkpoint)
        return EXIT_DIVERGED
    except ValidationError as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION
    return 0


if __name__ == "__main__":
    sys.exit(main())
