"""Synthetic corpus generation, image/mask IO, and split management.

Each image contains one textured foreground object per class (ellipses
with a smooth low-frequency radial wobble) over a noisy background, plus a
few small distractor blobs whose intensity mimics the foreground; the
distractors are never labeled, so telling them apart needs context beyond
a local glance. Shapes are stored analytically in the manifest, which
makes the ground-truth mask exactly rasterizable at any resolution.

Directory layout::

    corpus/
      images/NNNN.png    8-bit grayscale
      masks/NNNN.png     8-bit class ids
      points/NNNN.txt    written later by the point sampler
      manifest.json
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage


class ManifestError(ValueError):
    pass


SPLIT_NAMES = ("train", "val", "test")
SPLIT_FRACTIONS = {"train": 0.6, "val": 0.2, "test": 0.2}


@dataclass
class SyntheticCorpusSpec:
    n_images: int = 200
    size: int = 96
    classes: int = 1  # foreground classes (1 or 2)
    noise: float = 0.06
    min_area: int = 64
    n_distractors: tuple[int, int] = (1, 3)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_images < 5:
            raise ValueError("n_images must be >= 5 to fill every split")
        if not 1 <= self.classes <= 2:
            raise ValueError("classes must be 1 or 2")


@dataclass
class DatasetManifest:
    root: Path
    corpus_seed: int
    size: int
    num_classes: int  # including background
    images: dict[str, dict]  # id -> {"image": path, "mask": path, "shapes": [...]}
    splits: dict[str, list[str]]

    def ids(self, split: str | None = None) -> list[str]:
        if split is None:
            return sorted(self.images)
        if split not in self.splits:
            raise ManifestError(f"unknown split {split!r}")
        return list(self.splits[split])

    def image_path(self, image_id: str) -> Path:
        return self.root / self.images[image_id]["image"]

    def mask_path(self, image_id: str) -> Path:
        return self.root / self.images[image_id]["mask"]

    def points_path(self, image_id: str) -> Path:
        return self.root / "points" / f"{image_id}.txt"

    def shapes(self, image_id: str) -> list[dict]:
        return self.images[image_id]["shapes"]


# ---------------------------------------------------------------------------
# analytic shapes

def _inside(shape: dict, coords: np.ndarray) -> np.ndarray:
    """Membership test for one star-convex shape at normalized coords (..., 2)."""
    cy, cx = shape["center"]
    phi = shape["angle"]
    a, b = shape["axes"]
    dy = coords[..., 0] - cy
    dx = coords[..., 1] - cx
    v0 = np.cos(phi) * dy - np.sin(phi) * dx
    v1 = np.sin(phi) * dy + np.cos(phi) * dx
    u0, u1 = v0 / a, v1 / b
    rho = np.sqrt(u0**2 + u1**2)
    theta = np.arctan2(u0, u1)
    wobble = np.zeros_like(rho)
    for k, amp, ph in shape["waves"]:
        wobble += amp * np.sin(k * theta + ph)
    return rho <= 1.0 + wobble


def _pixel_center_coords(size: int) -> np.ndarray:
    ax = -1.0 + 2.0 * (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(ax, ax, indexing="ij")
    return np.stack([yy, xx], axis=-1)


def rasterize_mask(shapes: list[dict], size: int) -> np.ndarray:
    """Exact label mask at any resolution: evaluate each labeled shape at
    pixel centers; later shapes overwrite earlier ones."""
    coords = _pixel_center_coords(size)
    mask = np.zeros((size, size), dtype=np.uint8)
    for shape in shapes:
        if shape["label"] == 0:
            continue
        mask[_inside(shape, coords)] = shape["label"]
    return mask


def _random_shape(rng: np.random.Generator, label: int, center_range: float, scale: tuple[float, float]) -> dict:
    waves = []
    for k in rng.choice([2, 3, 4, 5], size=2, replace=False):
        waves.append([int(k), float(rng.uniform(0.03, 0.1)), float(rng.uniform(0, 2 * np.pi))])
    return {
        "label": int(label),
        "center": [float(rng.uniform(-center_range, center_range)) for _ in range(2)],
        "angle": float(rng.uniform(0, np.pi)),
        "axes": [float(rng.uniform(*scale)) for _ in range(2)],
        "waves": waves,
    }


def _render_image(shapes: list[dict], mask: np.ndarray, size: int, noise: float, rng: np.random.Generator) -> np.ndarray:
    coords = _pixel_center_coords(size)
    img = np.full((size, size), 0.35)
    # low-frequency background texture
    img += ndimage.gaussian_filter(rng.normal(0.0, 1.0, (size, size)), size / 12.0) * 0.5
    for shape in shapes:
        region = _inside(shape, coords)
        if shape["label"] == 0:
            img[region] = 0.62 + 0.05 * np.sin(6 * coords[region][:, 0] * np.pi)
        else:
            base = 0.72 if shape["label"] == 1 else 0.5
            cy, cx = shape["center"]
            r2 = (coords[..., 0] - cy) ** 2 + (coords[..., 1] - cx) ** 2
            img[region] = base - 0.18 * np.sqrt(r2[region]) / max(shape["axes"])
    img += rng.normal(0.0, noise, (size, size))
    return np.clip(img, 0.0, 1.0)


def generate_corpus(spec: SyntheticCorpusSpec, out_dir: str | Path) -> DatasetManifest:
    """Write a deterministic synthetic corpus and its manifest.

    Foreground shapes are resampled until every class covers at least
    ``spec.min_area`` pixels at the generation resolution.
    """
    root = Path(out_dir)
    for sub in ("images", "masks", "points"):
        (root / sub).mkdir(parents=True, exist_ok=True)

    images: dict[str, dict] = {}
    for idx in range(spec.n_images):
        rng = np.random.default_rng([spec.seed, idx])
        shapes: list[dict] = []
        for label in range(1, spec.classes + 1):
            for _ in range(200):
                cand = _random_shape(rng, label, center_range=0.35, scale=(0.28, 0.55))
                trial = rasterize_mask(shapes + [cand], spec.size)
                if (trial == label).sum() >= spec.min_area and all(
                    (trial == s["label"]).sum() >= spec.min_area for s in shapes if s["label"]
                ):
                    shapes.append(cand)
                    break
            else:
                raise RuntimeError(f"could not place class {label} in image {idx}")
        for _ in range(rng.integers(spec.n_distractors[0], spec.n_distractors[1] + 1)):
            shapes.append(_random_shape(rng, 0, center_range=0.8, scale=(0.05, 0.13)))

        mask = rasterize_mask(shapes, spec.size)
        img = _render_image(shapes, mask, spec.size, spec.noise, rng)
        image_id = f"{idx:04d}"
        save_image(root / "images" / f"{image_id}.png", img)
        save_mask(root / "masks" / f"{image_id}.png", mask)
        images[image_id] = {
            "image": f"images/{image_id}.png",
            "mask": f"masks/{image_id}.png",
            "shapes": shapes,
        }

    ids = sorted(images)
    order = np.random.default_rng([spec.seed, 0xD1CE]).permutation(len(ids))
    n_train = int(np.floor(0.6 * len(ids)))
    n_val = int(np.floor(0.2 * len(ids)))
    splits = {
        "train": sorted(ids[i] for i in order[:n_train]),
        "val": sorted(ids[i] for i in order[n_train : n_train + n_val]),
        "test": sorted(ids[i] for i in order[n_train + n_val :]),
    }
    manifest = DatasetManifest(
        root=root,
        corpus_seed=spec.seed,
        size=spec.size,
        num_classes=spec.classes + 1,
        images=images,
        splits=splits,
    )
    save_manifest(root / "manifest.json", manifest)
    return manifest


# ---------------------------------------------------------------------------
# IO

def save_image(path: str | Path, img: np.ndarray) -> None:
    """Float [0,1] array -> 8-bit grayscale PNG."""
    Image.fromarray((np.clip(img, 0, 1) * 255).round().astype(np.uint8), mode="L").save(path)


def load_image(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0


def save_mask(path: str | Path, mask: np.ndarray) -> None:
    Image.fromarray(mask.astype(np.uint8), mode="L").save(path)


def load_mask(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.uint8)


def save_manifest(path: str | Path, manifest: DatasetManifest) -> None:
    payload = {
        "corpus_seed": manifest.corpus_seed,
        "size": manifest.size,
        "num_classes": manifest.num_classes,
        "images": manifest.images,
        "splits": manifest.splits,
    }
    Path(path).write_text(json.dumps(payload, indent=2))


def load_manifest(path: str | Path, check_files: bool = True) -> DatasetManifest:
    """Read and validate a manifest.

    Raises ManifestError for malformed JSON (with line context), split
    overlap/gaps, empty splits, or missing referenced files (all listed).
    """
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"malformed manifest {path}: {e.msg} at line {e.lineno}, column {e.colno}") from e

    try:
        manifest = DatasetManifest(
            root=path.parent,
            corpus_seed=payload["corpus_seed"],
            size=payload["size"],
            num_classes=payload["num_classes"],
            images=payload["images"],
            splits=payload["splits"],
        )
    except KeyError as e:
        raise ManifestError(f"manifest {path} missing key {e}") from e

    validate_manifest(manifest, check_files=check_files)
    return manifest


def validate_manifest(manifest: DatasetManifest, check_files: bool = True) -> None:
    all_ids = set(manifest.images)
    seen: set[str] = set()
    for name in SPLIT_NAMES:
        ids = manifest.splits.get(name, [])
        if not ids:
            raise ManifestError(f"split {name!r} is empty")
        overlap = seen & set(ids)
        if overlap:
            raise ManifestError(f"splits overlap on ids {sorted(overlap)}")
        seen |= set(ids)
    if seen != all_ids:
        raise ManifestError(
            f"splits are not exhaustive: {sorted(all_ids - seen)} unassigned, "
            f"{sorted(seen - all_ids)} unknown"
        )
    n = len(all_ids)
    for name in SPLIT_NAMES:
        if abs(len(manifest.splits[name]) - SPLIT_FRACTIONS[name] * n) >= 1.0:
            raise ManifestError(
                f"split {name!r} has {len(manifest.splits[name])} of {n} images; "
                f"expected ~{SPLIT_FRACTIONS[name] * n:.1f}"
            )
    if check_files:
        missing = []
        for image_id, entry in manifest.images.items():
            for key in ("image", "mask"):
                p = manifest.root / entry[key]
                if not p.exists():
                    missing.append(str(p))
        if missing:
            raise ManifestError("manifest references missing files: " + ", ".join(sorted(missing)))
