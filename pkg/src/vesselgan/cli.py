"""Command line entry point: ``vesselgan <command> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid configuration.
Failures print one line ``error: <category>: <message>`` to standard error.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import subprocess
import sys
import time
from importlib import metadata
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import reference
from .dataset import (
    BudgetPlan,
    DatasetSpec,
    SamplingConfig,
    load_dataset,
    load_plan,
    prepare,
    sample_budget,
    save_plan,
)
from .exceptions import ConfigurationError
from .imaging import PreprocessConfig, preprocess
from .storage import sha256_file, write_preprocessed
from .trainer import TrainConfig, Trainer

log = logging.getLogger("vesselgan")

COMMANDS = ("preprocess", "sample", "train", "eval", "ablate", "diversity", "compare", "render")
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_CONFIG = 0, 1, 2, 3

# train flags that map one-to-one onto TrainConfig fields
_TRAIN_FLAGS = {
    "epochs": int, "batch_size": int, "lr_D": float, "lr_G": float, "seed": int, "head": str, "pooling": str,
    "norm": str, "matching_layer": str, "generator_objective": str, "semi_supervised": str, "use_unsup": str,
}


def _code_version() -> str:
    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        version = "unknown"
    try:
        commit = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                                cwd=Path(__file__).parent, timeout=5).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        commit = ""
    return f"{version}+{commit}" if commit else version


class RunManifest:
    """Write-once record of how an artifact directory was produced."""

    def __init__(self, argv: List[str]):
        self.record = {
            "command_line": list(argv),
            "config": {},
            "code_version": _code_version(),
            "python": platform.python_version(),
            "seeds": [],
            "inputs": {},
            "outputs": [],
            "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        }
        self._t0 = time.perf_counter()

    def add_input(self, path) -> None:
        path = Path(path)
        if path.is_file():
            self.record["inputs"][str(path)] = sha256_file(path)

    def write(self, path) -> Path:
        self.record["wall_clock_seconds"] = round(time.perf_counter() - self._t0, 3)
        path = Path(path)
        with open(path, "x") as fh:
            json.dump(self.record, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")
        return path


def _dataset_args(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--dataset", required=required, type=str.upper, choices=("DRIVE", "STARE"))
    p.add_argument("--root", help="dataset directory (default: $VESSELGAN_DATA_ROOT)")
    p.add_argument("--fold-seed", type=int, default=0, help="STARE fold permutation seed")


def _settings_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--unlabeled", type=int, default=20000, help="unlabeled pool size")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--stride", type=int, default=24)
    p.add_argument("--max-test-images", type=int)
    p.add_argument("--max-folds", type=int)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--all-pixels", action="store_true", help="score every pixel, not only the FOV")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vesselgan", description="Semi-supervised GAN retinal vessel segmentation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")

    p = sub.add_parser("preprocess", help="grayscale + CLAHE + gamma, written as 16-bit PNG with a manifest")
    _dataset_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--weights", type=float, nargs=3, default=list(PreprocessConfig.weights))
    p.add_argument("--clip-limit", type=float, default=PreprocessConfig.clip_limit)
    p.add_argument("--tile-grid", type=int, nargs=2, default=list(PreprocessConfig.tile_grid))
    p.add_argument("--gamma", type=float, default=PreprocessConfig.gamma)

    p = sub.add_parser("sample", help="draw an annotation-budget plan")
    _dataset_args(p)
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--pool", type=int, required=True, help="number of training images labels come from")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--unlabeled", type=int, default=20000)
    p.add_argument("--fold", type=int, default=0, help="STARE fold index")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train on a plan")
    p.add_argument("--plan", required=True)
    p.add_argument("--config", help="flat key = value TOML file")
    p.add_argument("--out", required=True)
    for flag, typ in _TRAIN_FLAGS.items():
        p.add_argument("--" + flag.replace("_", "-"), dest=flag, type=typ)
    p.add_argument("--heartbeat", type=int, default=10)

    p = sub.add_parser("eval", help="AUC of a trained run on the test images")
    p.add_argument("--run", required=True)
    _dataset_args(p)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--checkpoint", choices=("final", "best"), default="final")
    p.add_argument("--stride", type=int, default=24)
    p.add_argument("--max-images", type=int)
    p.add_argument("--all-pixels", action="store_true")
    p.add_argument("--out", help="output directory (default: <run>/eval)")

    p = sub.add_parser("ablate", help="pooling / normalisation / matching-layer grid")
    _dataset_args(p)
    _settings_args(p)
    p.add_argument("--budget", type=int, default=1000)
    p.add_argument("--layers", nargs="+", default=["C1", "C3", "C5", "C7", "C9", "Con1", "Con2"])
    p.add_argument("--blocks", nargs="+", default=["max:none", "average:none", "average:instance", "average:weight"],
                   help="pooling:norm pairs")
    p.add_argument("--objectives", nargs="+", default=["feature_matching", "vanilla"])
    p.add_argument("--out", required=True)

    p = sub.add_parser("diversity", help="budget vs number of source images")
    _dataset_args(p)
    _settings_args(p)
    p.add_argument("--budgets", type=int, nargs="+", default=[500, 1000])
    p.add_argument("--pools", type=int, nargs="+", default=[1, 2, 4, 8, 12, 16, 20])
    p.add_argument("--out", required=True)

    p = sub.add_parser("compare", help="Proposed (SP) and U-Net rows next to the published results")
    _dataset_args(p)
    _settings_args(p)
    p.add_argument("--budgets", type=int, nargs="+", default=list(reference.BUDGETS))
    p.add_argument("--out", required=True)

    p = sub.add_parser("render", help="overlay figure for one test image")
    p.add_argument("--run", required=True)
    _dataset_args(p)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--image", help="test image id (default: first)")
    p.add_argument("--checkpoint", choices=("final", "best"), default="final")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--stride", type=int, default=24)
    p.add_argument("--out", required=True)
    return parser


def _spec(args) -> DatasetSpec:
    return DatasetSpec(args.dataset, args.root, args.fold_seed)


def _cmd_preprocess(args, manifest: RunManifest) -> None:
    cfg = PreprocessConfig(tuple(args.weights), args.clip_limit, tuple(args.tile_grid), args.gamma)
    manifest.record["config"] = {"weights": cfg.weights, "clip_limit": cfg.clip_limit, "tile_grid": cfg.tile_grid, "gamma": cfg.gamma}
    data = load_dataset(_spec(args))
    records = []
    for img in data.train + data.test:
        records.append((img.image_id, img.split_tag, preprocess(img, cfg)))
        log.info("preprocessed %s", img.image_id)
    out = write_preprocessed(args.out, records)
    manifest.record["outputs"] = [str(out)] + [str(Path(args.out) / f"{r[0]}.png") for r in records]


def _cmd_sample(args, manifest: RunManifest) -> None:
    data = load_dataset(_spec(args), args.fold)
    plan = BudgetPlan(args.budget, args.pool, args.seed)
    split = sample_budget(data.train, plan, PreprocessConfig(), SamplingConfig(unlabeled_pool=args.unlabeled), data.name)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_plan(out, split)
    manifest.record.update(config={"budget": args.budget, "pool": args.pool, "unlabeled": args.unlabeled, "fold": args.fold},
                           seeds=[args.seed], outputs=[str(out)])
    log.info("plan with %d labeled / %d unlabeled patches from %s", len(split.labeled), len(split.unlabeled), ", ".join(split.chosen_ids))


def resolve_train_config(args) -> TrainConfig:
    """Built-in defaults, overridden by the config file, overridden by flags."""
    values = TrainConfig().to_dict()
    if args.config:
        values.update({k: v for k, v in TrainConfig.from_file(args.config).to_dict().items()})
    flags = {k: getattr(args, k) for k in _TRAIN_FLAGS if getattr(args, k) is not None}
    values.update(flags)
    values["heartbeat_every"] = args.heartbeat
    config = TrainConfig.from_mapping(values).validate()
    log.info("config (flags %s, file %s): %s", sorted(flags) or "none", args.config or "none", json.dumps(config.to_dict(), default=str))
    return config


def _cmd_train(args, manifest: RunManifest) -> None:
    config = resolve_train_config(args)
    split = load_plan(args.plan)
    out = Path(args.out)
    if (out / "manifest.json").exists():
        raise ConfigurationError(f"{out} already holds a run; manifests are write-once")
    out.mkdir(parents=True, exist_ok=True)
    (out / "train.toml").write_text(config.to_toml())
    manifest.add_input(args.plan)
    if args.config:
        manifest.add_input(args.config)
    manifest.record.update(config=config.to_dict(), seeds=[config.seed, split.plan.seed],
                           plan={"dataset": split.dataset, "budget": split.plan.budget, "pool": split.plan.pool})
    trainer = Trainer(config)
    labels = split.labeled.labels if split.labeled.labels is not None else np.zeros(split.labeled.values.shape, bool)
    trainer.train(split.labeled.values, labels.astype(np.int64), split.unlabeled.values, out_dir=out)
    manifest.record["outputs"] = sorted(str(p) for p in out.iterdir())


def _load_run(run: Path, which: str):
    from .estimator import VesselSegmenter

    return VesselSegmenter.load(run / f"checkpoint_{which}")


def _cmd_eval(args, manifest: RunManifest) -> None:
    from .eval import evaluate_images

    run = Path(args.run)
    est = _load_run(run, args.checkpoint)
    data = load_dataset(_spec(args), args.fold)
    test = data.test[: args.max_images] if args.max_images else data.test
    images = [prepare(i) for i in test]
    results = evaluate_images(est, images, stride=args.stride, fov_only=not args.all_pixels)
    out = Path(args.out) if args.out else run / "eval"
    out.mkdir(parents=True, exist_ok=True)
    mean = float(np.mean([a for _, a in results]))
    with open(out / "auc.csv", "w") as fh:
        fh.write("image_id,auc\n")
        fh.writelines(f"{i},{a:.6f}\n" for i, a in results)
        fh.write(f"mean,{mean:.6f}\n")
    manifest.add_input(run / f"checkpoint_{args.checkpoint}")
    manifest.record.update(config={"stride": args.stride, "fov_only": not args.all_pixels}, outputs=[str(out / "auc.csv")],
                           result={"mean_auc": mean})
    print(f"mean AUC {mean:.4f} over {len(results)} image(s)")


def _settings(args):
    from .eval import RunSettings

    return RunSettings(epochs=args.epochs, batch_size=args.batch_size, unlabeled_pool=args.unlabeled, seeds=tuple(args.seeds),
                       stride=args.stride, max_test_images=args.max_test_images, max_folds=args.max_folds,
                       fov_only=not args.all_pixels, lr=args.lr)


def _prepare_out(path) -> Path:
    out = Path(path)
    if (out / "manifest.json").exists():
        raise ConfigurationError(f"{out} already holds a run; manifests are write-once")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_ablate(args, manifest: RunManifest) -> None:
    from .eval import render_ablation_table, run_ablation_grid

    blocks = []
    for b in args.blocks:
        try:
            pooling, norm = b.split(":")
        except ValueError:
            raise ConfigurationError(f"block {b!r} must look like pooling:norm")
        blocks.append((pooling, norm))
    settings = _settings(args)
    out = _prepare_out(args.out)
    manifest.record.update(config=vars(args) | {"blocks": blocks}, seeds=list(settings.seeds))
    cells = run_ablation_grid(_spec(args), args.budget, blocks, args.layers, args.objectives, settings, out)
    manifest.record["outputs"] = sorted(str(p) for p in out.iterdir())
    print(render_ablation_table(cells, args.layers))


def _cmd_diversity(args, manifest: RunManifest) -> None:
    from .eval import run_budget_diversity

    settings = _settings(args)
    out = _prepare_out(args.out)
    manifest.record.update(config=vars(args), seeds=list(settings.seeds))
    cells = run_budget_diversity(_spec(args), args.budgets, args.pools, settings, out_dir=out)
    manifest.record["outputs"] = sorted(str(p) for p in out.iterdir())
    for c in cells:
        print(f"B={c.budget} M={c.pool} AUC={c.auc_mean:.4f} ± {c.auc_std:.4f}" + (f" ({c.error})" if c.error else ""))


def _cmd_compare(args, manifest: RunManifest) -> None:
    from .eval import run_comparison

    settings = _settings(args)
    out = _prepare_out(args.out)
    manifest.record.update(config=vars(args), seeds=list(settings.seeds))
    _, table = run_comparison(_spec(args), args.budgets, settings, out)
    manifest.record["outputs"] = sorted(str(p) for p in out.iterdir())
    print(table)


def _cmd_render(args, manifest: RunManifest) -> None:
    from .eval import predict_image, render_overlays

    run = Path(args.run)
    est = _load_run(run, args.checkpoint)
    data = load_dataset(_spec(args), args.fold)
    by_id = {img.image_id: img for img in data.test}
    if args.image and args.image not in by_id:
        raise ConfigurationError(f"unknown test image {args.image!r}; choose from {', '.join(by_id)}")
    img = by_id[args.image] if args.image else data.test[0]
    prepared = prepare(img)
    score = predict_image(prepared, est, stride=args.stride)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    render_overlays(img, score, img.vessel_gt, args.threshold, out)
    manifest.add_input(run / f"checkpoint_{args.checkpoint}")
    manifest.record.update(config={"image": img.image_id, "threshold": args.threshold, "stride": args.stride}, outputs=[str(out)])


_HANDLERS = {
    "preprocess": _cmd_preprocess, "sample": _cmd_sample, "train": _cmd_train, "eval": _cmd_eval,
    "ablate": _cmd_ablate, "diversity": _cmd_diversity, "compare": _cmd_compare, "render": _cmd_render,
}


def _manifest_target(args) -> Path:
    """Directory outputs carry ``manifest.json``; single-file outputs get a sibling ``<file>.manifest.json``."""
    if args.command == "eval":
        return (Path(args.out) if args.out else Path(args.run) / "eval") / "manifest.json"
    out = Path(args.out)
    if args.command in ("sample", "render"):
        return out.with_name(out.name + ".manifest.json")
    return out / "manifest.json"


def dispatch(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    # heartbeat and progress lines go to stderr for the duration of the command
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    previous_level = log.level
    log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    manifest = RunManifest(["vesselgan"] + argv)
    try:
        _HANDLERS[args.command](args, manifest)
        manifest.write(_manifest_target(args))
    except ConfigurationError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        category = getattr(exc, "category", "runtime")
        print(f"error: {category}: {type(exc).__name__}: {exc}".replace("\n", " "), file=sys.stderr)
        if args.verbose:
            log.exception("command failed")
        return EXIT_RUNTIME
    finally:
        log.removeHandler(handler)
        log.setLevel(previous_level)
    return EXIT_OK


def main() -> None:
    sys.exit(dispatch())
