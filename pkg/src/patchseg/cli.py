"""Command-line entry point.

Subcommands: ``generate`` (synthetic corpus), ``sample`` (point sets),
``train``, ``infer``, ``eval``, ``ablate`` (grid of flag/seed sweeps).

Configuration is a flat YAML mapping; precedence is flag > environment
(``PATCHSEG_<KEY>``) > config file > default. Every run echoes its fully
resolved configuration into the output directory, and re-running with that
echoed file (plus ``deterministic: true``) reproduces the run.

Ablation switches use the short spellings ``--ablate mea=on|add|concat``,
``--ablate spo=off|on|<count>:<con>``, ``--ablate global_cond=on|off``,
``--ablate source_coord=on|off``.

Exit codes: 0 success, 1 internal error, 2 user/config error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import traceback
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch
import yaml

from .data import (
    ManifestError,
    SyntheticCorpusSpec,
    generate_corpus,
    load_image,
    load_manifest,
    load_mask,
)
from .inference import (
    ReconstructionSpec,
    dice_metric,
    evaluate_split,
    field_from_model,
    reconstruct_dense,
    reconstruct_mise,
    save_prediction,
)
from .losses import LossConfig
from .model import ModelConfig, SegmentationModel, load_checkpoint
from .sampling import SamplingConfig, derive_image_seed, sample_points, save_points
from .trainer import TrainConfig, derive_seed, subsample_annotations, train

ENV_PREFIX = "PATCHSEG_"


class UserError(Exception):
    """Invalid input or configuration; maps to exit code 2."""


# configuration keys, defaults, and their one-line meanings live here so
# `--help-config`, the resolver, and the echo all agree
CONFIG_DEFAULTS: dict = {
    # training
    "iterations": 2000,
    "batch_images": 8,
    "points_per_image": 512,
    "lr": 1e-3,
    "lr_min": 1e-5,
    "weight_decay": 1e-4,
    "seed": 0,
    "annotation_fraction": 1.0,
    "val_every": 250,
    "val_images": 16,
    "log_every": 10,
    "deterministic": False,
    # ablation switches
    "mea": "on",  # on | add | concat
    "spo": "1:8",  # off | on | <count>:<connectivity>
    "global_cond": True,
    "source_coord": False,
    # loss
    "alpha": 0.5,
    "beta": 0.1,
    "lam": 1e-4,
    # model
    "d": 128,
    "patch_size": 32,
    "widths": [16, 32, 48, 64, 96],
    "blocks_per_stage": 2,
    "patch_hidden": [256, 256, 256],
    "image_hidden": [256, 128],
    "head": "softmax",
    "freq_bands": 0,
    "rescale_local": False,
    # sampling
    "n_background": 4000,
    "n_foreground": 2000,
    "boundary_fraction": 0.5,
    "boundary_band": 10,
    "jitter": False,
    # reconstruction
    "out_size": None,
    "mode": "mise",
    "initial_stride": 4,
    "threshold": 0.5,
    "margin": 0.15,
}


def _parse_scalar(text: str):
    return yaml.safe_load(text)


def resolve_config(config_path: str | None, overrides: dict) -> dict:
    """Merge defaults < file < environment < explicit overrides."""
    resolved = dict(CONFIG_DEFAULTS)
    if config_path:
        try:
            loaded = yaml.safe_load(Path(config_path).read_text())
        except FileNotFoundError as e:
            raise UserError(f"config file not found: {config_path}") from e
        except yaml.YAMLError as e:
            raise UserError(f"malformed config {config_path}: {e}") from e
        if loaded:
            unknown = set(loaded) - set(resolved)
            if unknown:
                raise UserError(f"unknown config keys: {sorted(unknown)}")
            resolved.update(loaded)
    for key in resolved:
        env = os.environ.get(ENV_PREFIX + key.upper())
        if env is not None:
            resolved[key] = _parse_scalar(env)
    for key, value in overrides.items():
        if value is not None:
            resolved[key] = value
    return resolved


def parse_ablate(items: list[str] | None) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UserError(f"--ablate expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        if key not in ("mea", "spo", "global_cond", "source_coord"):
            raise UserError(f"unknown ablation key {key!r}")
        out[key] = value
    return out


def _overreach_settings(spo: str) -> tuple[int, int]:
    if spo == "off":
        return 0, 8
    if spo == "on":
        return 1, 8
    try:
        count, con = spo.split(":")
        count, con = int(count), int(con)
    except ValueError as e:
        raise UserError(f"spo must be off, on, or <count>:<con>; got {spo!r}") from e
    if con not in (4, 8):
        raise UserError("spo connectivity must be 4 or 8")
    return count, con


def train_config_from(resolved: dict) -> TrainConfig:
    mea = str(resolved["mea"])
    if mea not in ("on", "add", "concat"):
        raise UserError(f"mea must be on, add, or concat; got {mea!r}")
    count, con = _overreach_settings(str(resolved["spo"]))
    def as_bool(v):
        return v if isinstance(v, bool) else str(v).lower() in ("on", "true", "1", "yes")
    try:
        return TrainConfig(
            iterations=int(resolved["iterations"]),
            batch_images=int(resolved["batch_images"]),
            points_per_image=int(resolved["points_per_image"]),
            lr=float(resolved["lr"]),
            lr_min=float(resolved["lr_min"]),
            weight_decay=float(resolved["weight_decay"]),
            seed=int(resolved["seed"]),
            annotation_fraction=float(resolved["annotation_fraction"]),
            val_every=int(resolved["val_every"]),
            val_images=None if resolved["val_images"] in (None, "none") else int(resolved["val_images"]),
            log_every=int(resolved["log_every"]),
            deterministic=as_bool(resolved["deterministic"]),
            fusion={"on": "attention", "add": "add", "concat": "concat"}[mea],
            overreach_count=count,
            overreach_connectivity=con,
            global_cond=as_bool(resolved["global_cond"]),
            source_coord=as_bool(resolved["source_coord"]),
            loss=LossConfig(
                alpha=float(resolved["alpha"]),
                beta=float(resolved["beta"]),
                lam=float(resolved["lam"]),
            ),
        )
    except ValueError as e:
        raise UserError(str(e)) from e


def model_config_from(resolved: dict, num_classes: int) -> ModelConfig:
    mea = {"on": "attention", "add": "add", "concat": "concat"}[str(resolved["mea"])]
    def as_bool(v):
        return v if isinstance(v, bool) else str(v).lower() in ("on", "true", "1", "yes")
    return ModelConfig(
        num_classes=num_classes,
        d=int(resolved["d"]),
        patch_size=int(resolved["patch_size"]),
        widths=tuple(resolved["widths"]),
        blocks_per_stage=int(resolved["blocks_per_stage"]),
        fusion=mea,
        patch_hidden=tuple(resolved["patch_hidden"]),
        image_hidden=tuple(resolved["image_hidden"]),
        head=str(resolved["head"]),
        global_cond=as_bool(resolved["global_cond"]),
        source_coord=as_bool(resolved["source_coord"]),
        rescale_local=as_bool(resolved["rescale_local"]),
        freq_bands=int(resolved["freq_bands"]),
    )


def echo_config(out_dir: Path, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.yaml").write_text(yaml.safe_dump(resolved, sort_keys=True))


# ---------------------------------------------------------------------------
# subcommands

def cmd_generate(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UserError(f"output directory {out} is not empty (use --force to overwrite)")
    spec = SyntheticCorpusSpec(
        n_images=args.n, size=args.size, classes=args.classes, noise=args.noise, seed=args.seed
    )
    manifest = generate_corpus(spec, out)
    print(
        f"generated {spec.n_images} images at {spec.size}x{spec.size} "
        f"({len(manifest.splits['train'])}/{len(manifest.splits['val'])}/"
        f"{len(manifest.splits['test'])} train/val/test) in {out}"
    )
    return 0


def cmd_sample(args) -> int:
    resolved = resolve_config(args.config, {
        "n_background": args.n_background,
        "n_foreground": args.n_foreground,
        "boundary_fraction": args.boundary_fraction,
        "boundary_band": args.band,
        "seed": args.seed,
    })
    manifest = _load_corpus(args.corpus)
    for idx, image_id in enumerate(manifest.ids()):
        cfg = SamplingConfig(
            n_background=int(resolved["n_background"]),
            n_foreground_per_class=int(resolved["n_foreground"]),
            boundary_fraction=float(resolved["boundary_fraction"]),
            boundary_band=int(resolved["boundary_band"]),
            seed=derive_image_seed(int(resolved["seed"]), idx),
            jitter=bool(resolved["jitter"]),
        )
        mask = load_mask(manifest.mask_path(image_id))
        samples, report = sample_points(mask, cfg, num_classes=manifest.num_classes)
        save_points(manifest.points_path(image_id), samples, cfg, report, manifest.num_classes)
        for warning in report.warnings:
            print(f"{image_id}: {warning}", file=sys.stderr)
    print(f"sampled points for {len(manifest.ids())} images into {manifest.root / 'points'}")
    return 0


def _load_corpus(path: str):
    corpus = Path(path)
    manifest_path = corpus / "manifest.json" if corpus.is_dir() else corpus
    if not manifest_path.exists():
        raise UserError(f"no manifest at {manifest_path}")
    try:
        return load_manifest(manifest_path)
    except ManifestError as e:
        raise UserError(str(e)) from e


def cmd_train(args) -> int:
    overrides = {
        "iterations": args.iterations,
        "seed": args.seed,
        "annotation_fraction": args.annotation_fraction,
        "deterministic": True if args.deterministic else None,
    }
    overrides.update(parse_ablate(args.ablate))
    resolved = resolve_config(args.config, overrides)
    manifest = _load_corpus(args.corpus)
    cfg = train_config_from(resolved)
    out_dir = Path(args.out)
    echo_config(out_dir, resolved)

    torch.manual_seed(derive_seed(cfg.seed, "init"))
    model = SegmentationModel(model_config_from(resolved, manifest.num_classes))
    try:
        result = train(manifest, model, cfg, out_dir)
    except ValueError as e:
        raise UserError(str(e)) from e
    print(
        f"trained {cfg.iterations} iterations; best val dice "
        f"{result.best_val_dice:.4f} at iteration {result.best_iteration}; "
        f"checkpoints in {out_dir}"
    )
    if result.skipped_images:
        print(f"skipped (no point files): {result.skipped_images}", file=sys.stderr)
    return 0


def cmd_infer(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise UserError(f"checkpoint not found: {ckpt}")
    model, metadata = load_checkpoint(ckpt)
    image = load_image(args.image)
    size = args.out_size or image.shape[0]
    spec = ReconstructionSpec(
        target_height=size,
        target_width=size if args.out_size else image.shape[1],
        initial_stride=args.stride,
        threshold=args.threshold,
        refinement=args.mode,
    )
    field = field_from_model(model, image)
    if spec.refinement == "dense":
        mask, evals = reconstruct_dense(field, spec)
    else:
        mask, evals = reconstruct_mise(field, spec)
    sidecar = {
        "target_size": [spec.target_height, spec.target_width],
        "threshold": spec.threshold,
        "refinement": spec.refinement,
        "checkpoint": str(ckpt),
        "evaluations": evals,
    }
    if args.compare_dense and spec.refinement == "mise":
        dense_mask, dense_evals = reconstruct_dense(field, spec)
        sidecar["dense_agreement"] = float((dense_mask == mask).mean())
        sidecar["dense_evaluations"] = dense_evals
    if args.truth:
        truth = load_mask(args.truth)
        try:
            result = dice_metric(mask, truth)
        except ValueError as e:
            raise UserError(f"--truth does not match the prediction: {e}") from e
        sidecar["dice_per_class"] = result.per_class
        sidecar["dice_foreground_mean"] = result.foreground_mean
    out = Path(args.out)
    save_prediction(out, mask, sidecar)
    print(f"wrote {out} and {out.with_suffix('.json')}")
    return 0


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise UserError(f"checkpoint not found: {ckpt}")
    model, _ = load_checkpoint(ckpt)
    manifest = _load_corpus(args.corpus)
    results = evaluate_split(model, manifest, args.split)
    classes = sorted({c for _, r in results for c in r.per_class})
    fields = ["image_id", "mean_dice"] + [f"dice_class_{c}" for c in classes]
    rows = []
    for image_id, r in results:
        row = {"image_id": image_id, "mean_dice": r.foreground_mean}
        row.update({f"dice_class_{c}": r.per_class.get(c, "") for c in classes})
        rows.append(row)
    mean = float(np.mean([r.foreground_mean for _, r in results]))
    summary = {"image_id": "mean", "mean_dice": mean}
    summary.update({
        f"dice_class_{c}": float(np.mean([r.per_class[c] for _, r in results if c in r.per_class]))
        for c in classes
    })
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
        writer.writerow(summary)
    print(f"{args.split} mean foreground dice: {mean:.4f} ({len(rows)} images) -> {out}")
    return 0


def _cell_name(flags: dict, seed: int) -> str:
    blob = json.dumps({**flags, "seed": seed}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def cmd_ablate(args) -> int:
    resolved_base = resolve_config(args.config, {"iterations": args.iterations})
    manifest = _load_corpus(args.corpus)
    grid_axes: list[tuple[str, list[str]]] = []
    for item in args.grid or []:
        if "=" not in item:
            raise UserError(f"--grid expects KEY=V1,V2,..., got {item!r}")
        key, values = item.split("=", 1)
        parse_ablate([f"{key}={values.split(',')[0]}"])  # validate the key
        grid_axes.append((key, values.split(",")))
    seeds = [int(s) for s in args.seeds.split(",")]

    cells: list[dict] = [{}]
    for key, values in grid_axes:
        cells = [{**c, key: v} for c in cells for v in values]

    out_root = Path(args.out)
    out_root.mkdir(parents=True, exist_ok=True)
    summary_rows = []
    for flags in cells:
        for seed in seeds:
            name = _cell_name(flags, seed)
            cell_dir = out_root / f"cell_{name}"
            done_file = cell_dir / "done.json"
            if done_file.exists():
                record = json.loads(done_file.read_text())
                print(f"skipping completed cell {flags} seed={seed}")
            else:
                resolved = dict(resolved_base)
                resolved.update(flags)
                resolved["seed"] = seed
                cfg = train_config_from(resolved)
                echo_config(cell_dir, resolved)
                torch.manual_seed(derive_seed(seed, "init"))
                model = SegmentationModel(model_config_from(resolved, manifest.num_classes))
                result = train(manifest, model, cfg, cell_dir)
                best, _ = load_checkpoint(result.best_path)
                test = evaluate_split(best, manifest, "test")
                test_dice = float(np.mean([r.foreground_mean for _, r in test]))
                record = {
                    **flags,
                    "seed": seed,
                    "val_dice": result.best_val_dice,
                    "test_dice": test_dice,
                }
                done_file.write_text(json.dumps(record, indent=2))
            summary_rows.append(record)
            print(f"cell {flags} seed={seed}: test dice {record['test_dice']:.4f}")

    fields = sorted({k for row in summary_rows for k in row})
    with (out_root / "summary.csv").open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        writer.writerows(summary_rows)
    print(f"wrote {out_root / 'summary.csv'} ({len(summary_rows)} cells)")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchseg",
        description="Patch-level implicit segmentation: corpus generation, "
        "point sampling, training, reconstruction, evaluation, ablation sweeps.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--classes", type=int, default=1)
    p.add_argument("--noise", type=float, default=0.06)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("sample", help="sample training points for a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--config")
    p.add_argument("--n-background", type=int, dest="n_background")
    p.add_argument("--n-foreground", type=int, dest="n_foreground")
    p.add_argument("--boundary-fraction", type=float, dest="boundary_fraction")
    p.add_argument("--band", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("train", help="train a model on a sampled corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--annotation-fraction", type=float, dest="annotation_fraction")
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--ablate", action="append", metavar="KEY=VALUE")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="reconstruct a mask from one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--out-size", type=int, dest="out_size")
    p.add_argument("--mode", choices=("mise", "dense"), default="mise")
    p.add_argument("--stride", type=int, default=4)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--truth", help="optional ground-truth mask for Dice in the sidecar")
    p.add_argument("--compare-dense", action="store_true", dest="compare_dense")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run a grid of ablation flags x seeds")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--grid", action="append", metavar="KEY=V1,V2")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--iterations", type=int)
    p.set_defaults(fn=cmd_ablate)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except UserError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ManifestError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
