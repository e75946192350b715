"""Command-line interface: ``selfrel {train,eval,visualize,ablate}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error
(missing data or checkpoint, decode failure, diverged training).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import trainer
from .config import TrainConfig, load_config
from .data_io import DatasetManifest, SyntheticShapesSpec, generate_synthetic, load_image, load_split
from .errors import CheckpointError, ConfigError, DecodeError, RejectedInputError, TrainingStepError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

_SPEC_STAMP = "synthetic_spec.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------


@dataclass
class Dataset:
    train_images: np.ndarray
    train_labels: np.ndarray | None
    val_images: np.ndarray
    val_labels: np.ndarray | None
    root: Path


def synthetic_spec(cfg: TrainConfig) -> SyntheticShapesSpec:
    d = cfg.data
    return SyntheticShapesSpec(image_size=d.image_size, classes=d.classes,
                               per_class_train=d.per_class_train, per_class_val=d.per_class_val,
                               seed=d.seed)


def dataset_root(cfg: TrainConfig, out_dir: str | Path | None) -> Path:
    if cfg.data.root:
        return Path(cfg.data.root)
    if not cfg.data.synthetic:
        raise RejectedInputError("data.root is empty and data.synthetic is false: no dataset given")
    if out_dir is None:
        raise RejectedInputError("data.root is empty and no output directory to generate data in")
    return Path(out_dir) / "data"


def prepare_dataset(cfg: TrainConfig, out_dir: str | Path | None = None) -> Dataset:
    """Load ``data.root``; with ``data.synthetic`` the shapes dataset is rendered there first if absent.

    A stamp file records the generator settings so a stale dataset is re-rendered.
    """
    root = dataset_root(cfg, out_dir)
    if cfg.data.synthetic:
        spec = synthetic_spec(cfg)
        stamp = json.dumps(asdict(spec), sort_keys=True)
        stamp_path = root / _SPEC_STAMP
        if not (stamp_path.is_file() and stamp_path.read_text(encoding="utf-8") == stamp):
            generate_synthetic(spec, root)
            stamp_path.write_text(stamp, encoding="utf-8")
    elif not (root / "manifest.txt").is_file():
        raise RejectedInputError(f"dataset not found: {root} has no manifest.txt")
    man = DatasetManifest.read(root)
    xtr, ytr = load_split(man, "train")
    xva, yva = load_split(man, "val")
    if xtr.shape[0] == 0:
        raise RejectedInputError(f"dataset at {root} has no training images")
    return Dataset(xtr, ytr, xva, yva, root)


# --------------------------------------------------------------------------
# shared run helpers
# --------------------------------------------------------------------------


def resolve_config(args) -> TrainConfig:
    cfg = load_config(getattr(args, "config", None), getattr(args, "set", None) or [])
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
    cfg.validate()
    return cfg


def run_training(cfg: TrainConfig, data: Dataset, out_dir: str | Path, echo="stdout"):
    return trainer.train(cfg, data.train_images, out_dir, echo=echo)


def evaluate_params(params, cfg: TrainConfig, data: Dataset) -> tuple[ev.RelationDiffReport, float]:
    """Relation difference on the validation images and linear-probe accuracy (``nan`` without labels)."""
    eval_images = data.val_images if data.val_images.shape[0] else data.train_images
    rep = ev.relation_difference(params, eval_images, cfg)
    acc = float("nan")
    if data.train_labels is not None and data.val_labels is not None and data.val_images.shape[0]:
        acc = ev.linear_probe(params, cfg, data.train_images, data.train_labels,
                              data.val_images, data.val_labels)
    return rep, acc


def train_and_evaluate(cfg: TrainConfig, data: Dataset, out_dir: str | Path,
                       echo=None) -> tuple[float, float, float]:
    state = run_training(cfg, data, out_dir, echo=echo)
    rep, acc = evaluate_params(state.pair.teacher, cfg, data)
    report = rep.to_text() + f"probe_accuracy = {acc:.9g}\n"
    (Path(out_dir) / "eval.txt").write_text(report, encoding="utf-8")
    return rep.pixel_diff, rep.channel_diff, acc


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    data = prepare_dataset(cfg, out)
    out.mkdir(parents=True, exist_ok=True)
    state = None
    if args.resume:
        state = trainer.checkpoint_load(args.resume, cfg, data.train_images.shape[0])
    trainer.train(cfg, data.train_images, out, state=state, max_steps=args.max_steps)
    print(f"config digest {cfg.digest()}")
    return EXIT_OK


def _load_checkpoint(args) -> tuple[TrainConfig, trainer.TrainerState]:
    path = Path(args.checkpoint)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    cfg = None
    if args.config or args.set or args.seed is not None:
        cfg = resolve_config(args)
    state = trainer.checkpoint_load(path, cfg)
    return state.cfg, state


def cmd_eval(args) -> int:
    cfg, state = _load_checkpoint(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = prepare_dataset(cfg, out)
    params = state.pair.teacher
    if args.which == "relations":
        images = data.val_images if data.val_images.shape[0] else data.train_images
        text = ev.relation_difference(params, images, cfg).to_text()
    else:
        acc = ev.linear_probe(params, cfg, data.train_images, data.train_labels,
                              data.val_images, data.val_labels)
        text = f"probe_accuracy = {acc:.9g}\nconfig_digest = {cfg.digest()}\n"
    (out / f"eval_{args.which}.txt").write_text(text, encoding="utf-8")
    (out / "config.cfg").write_text(cfg.to_text(), encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def parse_query(text: str) -> tuple[str, object]:
    """``pixel:I`` or ``channel:A,B``."""
    kind, sep, rest = text.partition(":")
    if not sep:
        raise UsageError(f"query {text!r} must look like pixel:I or channel:A,B")
    try:
        if kind == "pixel":
            return kind, int(rest)
        if kind == "channel":
            a, b = (int(v) for v in rest.split(","))
            return kind, (a, b)
    except ValueError:
        raise UsageError(f"malformed query {text!r}") from None
    raise UsageError(f"unknown query kind {kind!r}; use pixel or channel")


def cmd_visualize(args) -> int:
    kind, query = parse_query(args.query)
    cfg, state = _load_checkpoint(args)
    image = load_image(args.image)
    grid = ev.export_relation_heatmap(state.pair.teacher, image, cfg, kind, query, args.out)
    print(f"wrote {args.out} ({grid.shape[0]}x{grid.shape[1]} cells)")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    try:
        axes = [ev.parse_axis(a) for a in args.axis or []]
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError as e:
        raise UsageError(f"bad --seeds: {e}") from None
    if args.seed is not None and args.seeds == _DEFAULT_SEEDS:
        seeds = [args.seed]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = prepare_dataset(cfg, out)

    def run_cell(cell_cfg: TrainConfig):
        cell_dir = out / "cells" / ev.cell_id(cell_cfg)
        print(f"cell {ev.cell_id(cell_cfg)} seed {cell_cfg.train.seed}", flush=True)
        return train_and_evaluate(cell_cfg, data, cell_dir, echo=None)

    _, table = ev.ablation_suite(cfg, axes, seeds, run_cell)
    (out / "ablation.tsv").write_text(table, encoding="utf-8")
    (out / "config.cfg").write_text(cfg.to_text(), encoding="utf-8")
    print(table, end="")
    return EXIT_OK


_DEFAULT_SEEDS = "0"

_TABLE_HELP = ("The table (ablation.tsv) is tab-separated with columns: "
               + ", ".join(ev.TABLE_COLUMNS) + ". Each cell changes one axis from the base config; "
               "per-seed runs live under cells/<config digest prefix>/.")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="selfrel", description="Self-relation self-supervised pretraining on a toy ViT.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, out_help: str):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
        sp.add_argument("--seed", type=int, help="shortcut for --set train.seed=N")
        sp.add_argument("--out", required=True, help=out_help)

    t = sub.add_parser("train", help="pretrain student/teacher encoders")
    common(t, "output directory (config.cfg, metrics.jsonl, checkpoints)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--max-steps", type=int, help="stop after this many steps")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="relation differences or linear probe of a checkpoint's teacher")
    e.add_argument("checkpoint")
    e.add_argument("--which", choices=("relations", "probe"), default="relations")
    common(e, "output directory for eval_<which>.txt")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("visualize", help="render a relation heatmap PNG")
    v.add_argument("checkpoint")
    v.add_argument("--image", required=True, help="PNG or raw container image")
    v.add_argument("--query", required=True, help="pixel:I (relation row I) or channel:A,B")
    common(v, "output PNG path")
    v.set_defaults(func=cmd_visualize)

    a = sub.add_parser("ablate", help="one-factor-at-a-time ablation table", epilog=_TABLE_HELP)
    common(a, "output directory (ablation.tsv, cells/)")
    a.add_argument("--axis", action="append",
                   help="AXIS[=V1,V2,...]; axes: " + ", ".join(ev.AXES)
                   + "; a bare M, temps, asymmetric or loss axis uses its standard grid")
    a.add_argument("--seeds", default=_DEFAULT_SEEDS, help="comma-separated seeds (default 0)")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"selfrel: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (RejectedInputError, CheckpointError, DecodeError, TrainingStepError, OSError) as e:
        print(f"selfrel: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
