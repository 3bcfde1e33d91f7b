"""Training loop: batches of images and their pre-sampled points, one
encoder pass per image per step, both decoder heads, neighbor overreach,
the blended point loss, and AdamW with cosine learning-rate decay.

Every run writes into one directory: ``losses.csv`` (fixed columns:
iteration, L_total, L_PI_patch, L_PI_image, L_SPO, reg), ``val.csv``
(iteration, val_dice), ``best.pt``/``last.pt`` checkpoints with JSON
metadata. Validation Dice is computed by dense reconstruction on (a capped
subset of) the validation split; the best-validation checkpoint is kept.

All randomness derives from one root seed: each consumer hashes its name
into the stream (see ``derive_seed``), so runs are reproducible and the
deterministic flag makes them bitwise so.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .data import DatasetManifest, load_image, load_mask
from .decoder import OverreachConfig, sample_overreach_batch
from .geometry import Connectivity
from .inference import evaluate_split
from .losses import LossConfig, total_loss
from .model import ModelConfig, SegmentationModel, cell_centers, grid_cells, save_checkpoint
from .sampling import labels_to_one_hot, load_points

LOSS_COLUMNS = ["iteration", "L_total", "L_PI_patch", "L_PI_image", "L_SPO", "reg"]


class TrainingDiverged(RuntimeError):
    pass


def derive_seed(root_seed: int, name: str) -> int:
    """Stable per-component seed: root seed mixed with the component name."""
    digest = hashlib.sha256(f"{root_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_images: int = 8
    points_per_image: int = 512
    lr: float = 1e-3
    lr_min: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-4
    seed: int = 0
    annotation_fraction: float = 1.0
    val_every: int = 250
    val_images: int | None = 16
    log_every: int = 10
    deterministic: bool = False
    dry_run: bool = False
    # ablation switches
    fusion: str = "attention"  # attention | add | concat
    overreach_count: int = 1  # 0 disables the perturbation
    overreach_connectivity: int = 8
    global_cond: bool = True
    source_coord: bool = False
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0.0 < self.annotation_fraction <= 1.0:
            raise ValueError("annotation_fraction must lie in (0, 1]")
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        self.betas = tuple(self.betas)

    def overreach(self) -> OverreachConfig:
        return OverreachConfig(
            connectivity=Connectivity(self.overreach_connectivity),
            occurrence=self.overreach_count,
        )

    def model_config(self, num_classes: int, patch_size: int = 32, **overrides) -> ModelConfig:
        return ModelConfig(
            num_classes=num_classes,
            patch_size=patch_size,
            fusion=self.fusion,
            global_cond=self.global_cond,
            source_coord=self.source_coord,
            **overrides,
        )


@dataclass
class TrainResult:
    out_dir: Path
    best_path: Path
    last_path: Path
    losses_path: Path
    val_path: Path
    best_val_dice: float
    best_iteration: int
    skipped_images: list[str]


def subsample_annotations(manifest: DatasetManifest, fraction: float, seed: int) -> DatasetManifest:
    """Deterministic image-level subset of the training split; val and test
    are untouched. Nested by construction: smaller fractions are prefixes
    of the same seeded permutation."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    train_ids = sorted(manifest.splits["train"])
    if fraction == 1.0:
        return manifest
    k = int(np.floor(fraction * len(train_ids)))
    if k == 0:
        raise ValueError(f"fraction {fraction} keeps 0 of {len(train_ids)} training images")
    order = np.random.default_rng(seed).permutation(len(train_ids))
    kept = sorted(train_ids[i] for i in order[:k])
    splits = dict(manifest.splits)
    splits["train"] = kept
    return replace(manifest, splits=splits)


def _load_training_data(manifest: DatasetManifest, ids: list[str]):
    """Images and point sets into memory; images missing a point file are
    skipped and reported."""
    images, coords, labels, skipped = {}, {}, {}, []
    for image_id in ids:
        ppath = manifest.points_path(image_id)
        if not ppath.exists():
            skipped.append(image_id)
            continue
        p_s, p_i, lab, _ = load_points(ppath)
        images[image_id] = torch.as_tensor(
            load_image(manifest.image_path(image_id)), dtype=torch.float32
        ).unsqueeze(0)
        coords[image_id] = (p_s.astype(np.float32), p_i.astype(np.float32))
        labels[image_id] = lab
    return images, coords, labels, skipped


def compute_step_loss(
    model: SegmentationModel,
    batch_images: torch.Tensor,
    coords_i: torch.Tensor,
    coords_s: torch.Tensor,
    targets: torch.Tensor,
    cfg: TrainConfig,
    overreach_draw: tuple[np.ndarray, np.ndarray] | None,
):
    """Loss for one prepared batch. Kept free of RNG so finite-difference
    probes can re-evaluate it; the overreach draw is passed in."""
    b, p, _ = coords_i.shape
    grid = model.grid_for(*batch_images.shape[-2:])
    z_grid, z_image = model.encode(batch_images)
    probs_patch, probs_image, z_p = model.decode_points(
        z_grid, z_image, coords_i, grid, p_s=coords_s
    )
    groups = torch.arange(b).repeat_interleave(p)

    spo_o = spo_probs = spo_groups = None
    if overreach_draw is not None and len(overreach_draw[0]) > 0:
        point_ids, nbr_cells = overreach_draw
        flat_coords = coords_i.reshape(-1, 2)
        flat_src = coords_s.reshape(-1, 2)
        flat_targets = targets.reshape(-1, targets.shape[-1])
        img_of_point = torch.arange(b).repeat_interleave(p)
        pids = torch.as_tensor(point_ids)
        cells_t = torch.as_tensor(nbr_cells)
        centers = cell_centers(cells_t, grid).to(coords_i.dtype)
        p_i_sel = flat_coords[pids]
        p_p = p_i_sel - centers
        scale = model.local_scale(grid, coords_i)
        if scale is not None:
            p_p = p_p * scale
        z_sel = z_grid[img_of_point[pids], cells_t[:, 0], cells_t[:, 1]]
        z_i_sel = z_image[img_of_point[pids]]
        spo_probs = model.patch_decoder(
            p_p,
            z_sel,
            p_i_sel if model.config.global_cond else None,
            z_i_sel if model.config.global_cond else None,
            flat_src[pids] if model.config.source_coord else None,
        )
        spo_o = flat_targets[pids]
        spo_groups = img_of_point[pids]

    return total_loss(
        targets.reshape(-1, targets.shape[-1]),
        probs_patch.reshape(-1, probs_patch.shape[-1]),
        probs_image.reshape(-1, probs_image.shape[-1]),
        cfg.loss,
        spo_o=spo_o,
        spo_o_hat=spo_probs,
        z_patch=z_p.reshape(-1, z_p.shape[-1]),
        z_image=z_image,
        groups=groups,
        spo_groups=spo_groups,
    )


def _lr_at(step: int, cfg: TrainConfig) -> float:
    t = step / max(1, cfg.iterations)
    return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + math.cos(math.pi * t))


def _validation_dice(model: SegmentationModel, manifest: DatasetManifest, cfg: TrainConfig) -> float:
    ids = manifest.ids("val")
    if cfg.val_images is not None:
        ids = ids[: cfg.val_images]
    was_training = model.training
    results = evaluate_split(model, manifest, "val", image_ids=ids)
    if was_training:
        model.train()
    scores = [r.foreground_mean for _, r in results if not math.isnan(r.foreground_mean)]
    return float(np.mean(scores)) if scores else 0.0


def train(
    manifest: DatasetManifest,
    model: SegmentationModel,
    cfg: TrainConfig,
    out_dir: str | Path,
) -> TrainResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)

    view = subsample_annotations(manifest, cfg.annotation_fraction, derive_seed(cfg.seed, "annotations"))
    train_ids = view.ids("train")
    images, coords, labels, skipped = _load_training_data(view, train_ids)
    usable = [i for i in train_ids if i in images]
    if not usable:
        raise ValueError("no training images with point files")
    num_classes = model.config.num_classes

    opt = torch.optim.AdamW(
        model.parameters(), lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay
    )
    batch_rng = np.random.default_rng(derive_seed(cfg.seed, "batches"))
    point_rng = np.random.default_rng(derive_seed(cfg.seed, "points"))
    spo_rng = np.random.default_rng(derive_seed(cfg.seed, "overreach"))

    losses_path = out_dir / "losses.csv"
    val_path = out_dir / "val.csv"
    best_path = out_dir / "best.pt"
    last_path = out_dir / "last.pt"
    metadata = {
        "train_config": asdict(cfg),
        "seed": cfg.seed,
        "num_train_images": len(usable),
        "skipped_images": skipped,
    }

    best_val = -1.0
    best_iter = -1
    model.train()

    with losses_path.open("w", newline="") as loss_file, val_path.open("w", newline="") as val_file:
        loss_writer = csv.DictWriter(loss_file, fieldnames=LOSS_COLUMNS)
        loss_writer.writeheader()
        val_writer = csv.DictWriter(val_file, fieldnames=["iteration", "val_dice"])
        val_writer.writeheader()

        if cfg.dry_run:
            save_checkpoint(best_path, model, {**metadata, "iteration": 0, "val_dice": None})
            save_checkpoint(last_path, model, {**metadata, "iteration": 0, "val_dice": None})
            return TrainResult(out_dir, best_path, last_path, losses_path, val_path, -1.0, -1, skipped)

        overreach_cfg = cfg.overreach()
        grid = model.grid_for(*images[usable[0]].shape[-2:])

        for step in range(cfg.iterations):
            picked = batch_rng.choice(len(usable), size=min(cfg.batch_images, len(usable)), replace=False)
            batch_ids = [usable[i] for i in picked]
            img_batch = torch.stack([images[i] for i in batch_ids])
            ci, cs, tg = [], [], []
            for image_id in batch_ids:
                p_s, p_i = coords[image_id]
                lab = labels[image_id]
                n = len(lab)
                take = point_rng.choice(n, size=cfg.points_per_image, replace=n < cfg.points_per_image)
                ci.append(p_i[take])
                cs.append(p_s[take])
                tg.append(labels_to_one_hot(lab[take], num_classes))
            coords_i = torch.as_tensor(np.stack(ci))
            coords_s = torch.as_tensor(np.stack(cs))
            targets = torch.as_tensor(np.stack(tg), dtype=torch.float32)

            draw = None
            if overreach_cfg.occurrence > 0 and grid.n_patches > 1:
                cells = grid_cells(coords_i.reshape(-1, 2), grid).numpy()
                draw = sample_overreach_batch(cells, grid, overreach_cfg, spo_rng)

            for g in opt.param_groups:
                g["lr"] = _lr_at(step, cfg)
            opt.zero_grad()
            loss, breakdown = compute_step_loss(model, img_batch, coords_i, coords_s, targets, cfg, draw)
            if not math.isfinite(breakdown.total):
                raise TrainingDiverged(f"non-finite loss at step {step}: {breakdown}")
            loss.backward()
            opt.step()

            if step % cfg.log_every == 0 or step == cfg.iterations - 1:
                loss_writer.writerow({k: (v if k == "iteration" else repr(v)) for k, v in breakdown.csv_row(step).items()})

            if (step + 1) % cfg.val_every == 0 or step == cfg.iterations - 1:
                val_dice = _validation_dice(model, view, cfg)
                val_writer.writerow({"iteration": step, "val_dice": repr(val_dice)})
                if val_dice > best_val:
                    best_val = val_dice
                    best_iter = step
                    save_checkpoint(
                        best_path, model, {**metadata, "iteration": step, "val_dice": val_dice}
                    )

    save_checkpoint(last_path, model, {**metadata, "iteration": cfg.iterations - 1, "val_dice": best_val})
    if not best_path.exists():
        save_checkpoint(best_path, model, {**metadata, "iteration": cfg.iterations - 1, "val_dice": best_val})
    return TrainResult(out_dir, best_path, last_path, losses_path, val_path, best_val, best_iter, skipped)
