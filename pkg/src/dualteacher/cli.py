"""Command line: ``dualteacher {gen-data,train,eval,diagnose,compare}``.

Every subcommand exits 0 on success. Failures print one line to stderr,
``error: <kind>: <message>``, and exit nonzero (2 for bad input, 1 otherwise).
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Optional, Sequence

from . import engine
from .checkpoint import CheckpointError
from .config import ConfigError, TrainConfig, coerce, load_config
from .data import DataFormatError, ShapeGenConfig, generate, write_ppm
from .model import ModelConfig
from .tensor import ShapeError

CONFIG_KEYS = [f.name for f in fields(TrainConfig)]
USAGE_ERRORS = (ConfigError, ShapeError, ValueError, KeyError)


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _split_overrides(rest: Sequence[str]) -> dict[str, str]:
    """Turn ``--key value`` / ``--key=value`` pairs into config overrides."""
    out: dict[str, str] = {}
    it = iter(rest)
    for token in it:
        if not token.startswith("--"):
            raise CliError(f"unexpected argument {token!r}")
        key, eq, value = token[2:].partition("=")
        key = key.replace("-", "_")
        if key not in CONFIG_KEYS:
            raise CliError(f"unknown option --{key}")
        if not eq:
            try:
                value = next(it)
            except StopIteration:
                raise CliError(f"--{key} needs a value") from None
        out[key] = value
    return out


def _resolve_config(args, rest) -> TrainConfig:
    return load_config(args.config, _split_overrides(rest))


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args, rest) -> int:
    if rest:
        raise CliError(f"unexpected arguments {' '.join(rest)}")
    cfg = ShapeGenConfig(n_samples=args.n_samples, num_classes=args.num_classes, noise=args.noise,
                         seed=args.seed, height=args.size, width=args.size)
    dataset, manifest = generate(cfg, args.out, args.fraction, args.split_seed)
    if args.preview:
        for sid in dataset.train_ids[: args.preview]:
            write_ppm(Path(args.out) / f"{sid.replace('/', '_')}.ppm", dataset.load(sid).image)
    print(f"dataset {dataset.dataset_id}: {cfg.n_samples} train, {cfg.n_val} val, "
          f"{len(manifest.labeled)} labeled, {len(manifest.unlabeled)} unlabeled -> {args.out}")
    return 0


def cmd_train(args, rest) -> int:
    config = _resolve_config(args, rest)
    log = engine.train(config)
    print(f"final mIoU {log.final_miou:.4f} after {len(log.epochs)} epochs -> {config.run_dir}")
    return 0


def cmd_eval(args, rest) -> int:
    config = _resolve_config(args, rest)
    if args.checkpoint:
        ckpt = Path(args.checkpoint)
    else:
        found = sorted((Path(config.run_dir) / "checkpoints").glob(f"{args.which}_*.dtck"))
        found = [p for p in found if not p.stem.endswith("_init")] or found
        if not found:
            raise FileNotFoundError(f"no {args.which} checkpoints under {config.run_dir}")
        ckpt = found[-1]
    params, model_cfg = engine.load_params(ckpt)
    data = engine.TrainData.from_disk(config.data_dir, config.manifest_path)
    if model_cfg is not None and model_cfg.num_classes != data.num_classes:
        raise ShapeError(f"checkpoint has {model_cfg.num_classes} classes, data has {data.num_classes}")
    images, masks = data.val_images, data.val_masks
    if args.split == "labeled":
        images, masks = data.labeled_images, data.labeled_masks
    m, ious = engine.evaluate(params, images, masks, data.num_classes)
    print("checkpoint,split,miou," + ",".join(f"iou_{c}" for c in range(len(ious))))
    print(f"{ckpt},{args.split},{m:.6f}," + ",".join(f"{v:.6f}" for v in ious))
    return 0


def cmd_diagnose(args, rest) -> int:
    if rest:
        raise CliError(f"unexpected arguments {' '.join(rest)}")
    report = engine.diagnose(args.run_dir, args.epoch, args.width, args.k, args.reference, args.dump_masks)
    print("epochs,avg,std")
    for first, last, avg, std in report["distance_windows"]:
        print(f"{first}-{last},{avg:.6f},{std:.6f}")
    if "divergence" in report:
        print("class,iou_teacher0,iou_teacher1,delta")
        for cls, a, b, d in report["divergence"]:
            print(f"{cls},{a:.6f},{b:.6f},{d:.6f}")
    return 0


def cmd_compare(args, rest) -> int:
    base = _resolve_config(args, rest)
    configs = []
    for mode in args.modes.split(","):
        for pool in args.pools.split(";"):
            configs.append(base.with_overrides(mode=mode.strip(), aug_pool=pool.strip()))
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = engine.compare(configs, seeds, args.out)
    grid = engine.format_grid(rows)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "compare.csv").write_text(grid)
    sys.stdout.write(grid)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dualteacher", description="Dual-teacher semi-supervised segmentation toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic shape dataset and its label partition")
    g.add_argument("--out", required=True)
    g.add_argument("--n-samples", type=int, default=256)
    g.add_argument("--num-classes", type=int, default=4)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--noise", type=float, default=ShapeGenConfig.noise)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--fraction", type=float, default=1 / 8)
    g.add_argument("--split-seed", type=int, default=None)
    g.add_argument("--preview", type=int, default=0, help="also export this many samples as .ppm")
    g.set_defaults(func=cmd_gen_data)

    config_help = "key = value file; any config key may also be given as --key value"
    t = sub.add_parser("train", help="train one run", description=config_help)
    t.add_argument("--config")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint", description=config_help)
    e.add_argument("--config")
    e.add_argument("--checkpoint", help="defaults to the latest checkpoint in run_dir")
    e.add_argument("--which", default="student", help="checkpoint prefix: student, teacher0, ...")
    e.add_argument("--split", choices=("val", "labeled"), default="val")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("diagnose", help="prediction-distance windows and teacher divergence")
    d.add_argument("--run-dir", required=True)
    d.add_argument("--epoch", type=int, default=None)
    d.add_argument("--width", type=int, default=5)
    d.add_argument("--k", type=int, default=5)
    d.add_argument("--reference", choices=("active", "mean"), default="active")
    d.add_argument("--dump-masks", action="store_true")
    d.set_defaults(func=cmd_diagnose)

    c = sub.add_parser("compare", help="mean±std final mIoU grid over modes and pools", description=config_help)
    c.add_argument("--config")
    c.add_argument("--modes", default="single,dual")
    c.add_argument("--pools", default="cutmix;classmix,cutmix", help="';'-separated augmentation pools")
    c.add_argument("--seeds", default="0,1,2")
    c.add_argument("--out", default=None, help="directory for per-run outputs and compare.csv")
    c.set_defaults(func=cmd_compare)
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    one_line = " ".join(str(message).split())
    print(f"error: {kind}: {one_line}", file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(message)s")
        return args.func(args, rest)
    except CliError as exc:
        return _fail("usage", exc, 2)
    except FileNotFoundError as exc:
        return _fail("missing", exc, 2)
    except (CheckpointError, DataFormatError) as exc:
        return _fail("format", exc, 2)
    except engine.TrainingDiverged as exc:
        return _fail("diverged", exc, 1)
    except USAGE_ERRORS as exc:
        return _fail(type(exc).__name__, exc, 2)
    except OSError as exc:
        return _fail("io", exc, 1)


if __name__ == "__main__":
    sys.exit(main())
