"""Command-line entry point.

Subcommands: gen-data, pretrain, eval-knn, eval-linear, attention, gradcheck.
Exit codes: 0 success, 1 usage error, 2 runtime error (including a failed
gradient check).
"""
from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from .config import TrainConfig, load_config, override

logger = logging.getLogger("scfs")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
GRADCHECK_THRESHOLDS = {"float64": 1e-5, "float32": 1e-3}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def resolve_config(name: str | None) -> TrainConfig:
    """``micro`` and ``default`` are presets; anything else is a config file path."""
    from .verify import MICRO

    if name is None or name == "default":
        return TrainConfig()
    if name == "micro":
        return MICRO
    return load_config(name)


def _add_train_flags(p):
    p.add_argument("--config", help="config file or preset name (default, micro)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--no-fs", action="store_true", help="disable feature search (global/local contrast only)")
    p.add_argument("--no-multicrop", action="store_true", help="two global views only, cross-view search")
    p.add_argument("--layers", help="comma-separated stage names, e.g. res2,res3,res4")
    p.add_argument("--locals", type=int, dest="n_locals", help="number of local views")
    p.add_argument("--workers", type=int, help="augmentation worker threads")


def _config_from_args(args) -> TrainConfig:
    cfg = resolve_config(args.config)
    cfg = override(cfg, seed=args.seed, epochs=args.epochs, batch_size=args.batch_size, layers=args.layers,
                   n_locals=args.n_locals, workers=args.workers)
    if args.no_fs:
        cfg = cfg.replace(use_fs=False)
    if args.no_multicrop:
        cfg = cfg.replace(multicrop=False)
    cfg.validate()
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="scfs", description="Self-supervised pre-training with feature search.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=1800)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("pretrain", help="pre-train a student/teacher pair")
    p.add_argument("--data", help="dataset file (defaults to the config's dataset entry)")
    _add_train_flags(p)
    p.add_argument("--ckpt", required=True, help="checkpoint output path")
    p.add_argument("--trace", help="per-step loss trace output path")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--max-steps", type=int, help="stop after this many total steps")
    p.add_argument("--checkpoint-every", type=int, default=0)

    for name, helptext in (("eval-knn", "weighted k-NN on frozen features"),
                           ("eval-linear", "linear probe on frozen features")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--train-data", required=True)
        p.add_argument("--test-data", required=True)
        p.add_argument("--layer", default="trunk")
        p.add_argument("--student", action="store_true", help="evaluate the student instead of the teacher")
        p.add_argument("--save-banks", help="directory for train/test feature bank files")
        if name == "eval-knn":
            p.add_argument("--k", type=int, default=20)
            p.add_argument("--tau", type=float, default=0.07)
        else:
            p.add_argument("--probe-epochs", type=int, default=100)
            p.add_argument("--lr", type=float)
            p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("attention", help="export feature-search attention heatmaps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0, help="image index in the dataset")
    p.add_argument("--layer", default="res4")
    p.add_argument("--locals", type=int, default=8, dest="n_locals")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    p.add_argument("--config", default="micro")
    p.add_argument("--dtype", choices=sorted(GRADCHECK_THRESHOLDS), default="float64")
    p.add_argument("--max-coords", type=int, help="check a random subset of coordinates")
    p.add_argument("--seed", type=int, default=0)
    return parser


# ---------------------------------------------------------------- commands


def _load_images(path):
    from .data import load_dataset

    return load_dataset(path)


def cmd_gen_data(args) -> int:
    from .data import SyntheticShapesConfig, generate_synthetic

    cfg = SyntheticShapesConfig(n_classes=args.classes, image_size=args.size, count=args.count, seed=args.seed)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    generate_synthetic(cfg, args.out)
    print(f"wrote {args.count} images to {args.out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from .checkpoint import load_checkpoint
    from .trainer import fit

    state = None
    if args.resume:
        state, cfg = load_checkpoint(args.resume)
        if args.epochs is not None:
            cfg = cfg.replace(epochs=args.epochs)
    else:
        cfg = _config_from_args(args)
    path = args.data or cfg.dataset
    if not path:
        raise UsageError("no dataset given (use --data or set dataset in the config)")
    images, _ = _load_images(path)
    result = fit(images, cfg.replace(dataset=path), state, max_steps=args.max_steps, trace_path=args.trace,
                 checkpoint_path=args.ckpt, checkpoint_every=args.checkpoint_every)
    if result.records:
        first, last = result.records[0].losses.L, result.records[-1].losses.L
        print(f"steps {result.state.step}  first loss {first:.4f}  last loss {last:.4f}")
    else:
        print(f"steps {result.state.step}  no training steps run")
    print(f"checkpoint written to {args.ckpt}")
    return EXIT_OK


def _banks(args):
    import os

    from .checkpoint import load_checkpoint
    from .evaluation import make_bank, save_bank

    state, cfg = load_checkpoint(args.ckpt)
    params = state.student if args.student else state.teacher
    xtr, ytr = _load_images(args.train_data)
    xte, yte = _load_images(args.test_data)
    train = make_bank(params, xtr, ytr, args.layer, cfg.global_size)
    test = make_bank(params, xte, yte, args.layer, cfg.global_size)
    if args.save_banks:
        os.makedirs(args.save_banks, exist_ok=True)
        save_bank(os.path.join(args.save_banks, "train.bank"), train)
        save_bank(os.path.join(args.save_banks, "test.bank"), test)
    return train, test


def cmd_eval_knn(args) -> int:
    from .evaluation import knn_eval

    train, test = _banks(args)
    acc = knn_eval(train, test, args.k, args.tau)
    print(f"knn top-1 ({args.layer}, k={args.k}): {acc:.4f}")
    return EXIT_OK


def cmd_eval_linear(args) -> int:
    from .evaluation import linear_probe

    train, test = _banks(args)
    acc = linear_probe(train, test, epochs=args.probe_epochs, lr=args.lr, seed=args.seed)
    print(f"linear probe top-1 ({args.layer}): {acc:.4f}")
    return EXIT_OK


def cmd_attention(args) -> int:
    from .augment import AugConfig, make_views
    from .checkpoint import load_checkpoint
    from .evaluation import attention_export

    state, cfg = load_checkpoint(args.ckpt)
    images, _ = _load_images(args.data)
    if not 0 <= args.index < len(images):
        raise UsageError(f"--index {args.index} out of range for {len(images)} images")
    aug = AugConfig(global_scale=(1.0, 1.0), global_size=cfg.global_size, local_scale=tuple(cfg.local_scale),
                    local_size=cfg.local_size, n_locals=args.n_locals, flip_prob=0.0, jitter_prob=0.0,
                    grayscale_prob=0.0, blur_prob=0.0, seed=args.seed)
    views = make_views(images[args.index], aug, image_index=args.index)
    paths = attention_export(state.teacher, views.globals[0], views.locals, args.layer, args.out_dir)
    print(f"wrote {len(paths)} heatmaps to {args.out_dir}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .verify import micro_gradcheck, primitive_gradchecks

    cfg = resolve_config(args.config)
    dtype = np.float64 if args.dtype == "float64" else np.float32
    prim = primitive_gradchecks(seed=args.seed, analytic_dtype=dtype)
    worst_op = max(prim, key=prim.get)
    print(f"primitives: max relative error {prim[worst_op]:.3e} ({worst_op})")
    err = micro_gradcheck(dtype, args.max_coords, args.seed, cfg)
    print(f"full loss: max relative error {err:.3e}")
    err = max(err, prim[worst_op])
    limit = GRADCHECK_THRESHOLDS[args.dtype]
    ok = err < limit
    print(f"max relative error {err:.3e} ({args.dtype}, threshold {limit:.0e}): {'ok' if ok else 'FAILED'}")
    return EXIT_OK if ok else EXIT_RUNTIME


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "eval-knn": cmd_eval_knn,
    "eval-linear": cmd_eval_linear,
    "attention": cmd_attention,
    "gradcheck": cmd_gradcheck,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(levelname)s %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"scfs: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
