"""Point/occupancy training sets from label masks.

A mask is converted once into a set of (coordinate, one-hot occupancy)
pairs: uniformly spread background points plus per-class foreground points,
half of which (by default) hug the class boundary. Placement uses Latin
Hypercube sampling over the candidate pixel lists so the spread stays
stratified while every sample is guaranteed to land on an eligible pixel.

Boundary distances are measured with the exact Euclidean distance
transform, from pixel centers to the region interface (a half-pixel inside
the nearest outside pixel); pixels touching the interface always count as
distance zero, so ``radius=0`` selects exactly the boundary pixels.

Point sets are written one file per image: a columnar text file
(``p_s_y p_s_x p_i_y p_i_x label`` per line) plus a JSON sidecar recording
the sampling configuration and seed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geometry import pixel_to_normalized


@dataclass
class SamplingConfig:
    n_background: int = 4000
    n_foreground_per_class: int = 2000
    boundary_fraction: float = 0.5
    boundary_band: int = 10
    seed: int = 0
    jitter: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.boundary_fraction <= 1.0:
            raise ValueError("boundary_fraction must lie in [0, 1]")
        if self.n_background < 0 or self.n_foreground_per_class < 0:
            raise ValueError("sample counts must be >= 0")


@dataclass
class OccupancySample:
    """One training point: source coord, input coord, one-hot occupancy."""

    p_s: np.ndarray
    p_i: np.ndarray
    occupancy: np.ndarray

    @property
    def label(self) -> int:
        return int(np.argmax(self.occupancy))


@dataclass
class SamplingReport:
    counts: dict[int, int] = field(default_factory=dict)
    band_counts: dict[int, int] = field(default_factory=dict)
    skipped_classes: list[int] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def derive_image_seed(seed: int, image_id: int) -> int:
    """Per-image sampling seed: base seed XOR image id."""
    return int(seed) ^ int(image_id)


def boundary_band(mask: np.ndarray, class_id: int, radius: float) -> tuple[np.ndarray, bool]:
    """Pixels of a class within ``radius`` of its boundary.

    Returns ``(band, present)``. ``band`` is set for class pixels whose
    center lies within ``radius`` of the class/background interface
    (out-of-image counts as background); pixels adjacent to the interface
    are always in the band. Absent class -> all-false band, present=False.
    """
    region = mask == class_id
    if not region.any():
        return np.zeros_like(region, dtype=bool), False
    padded = np.pad(region, 1, constant_values=False)
    d_out = ndimage.distance_transform_edt(padded)[1:-1, 1:-1]
    band = region & (d_out <= max(radius + 0.5, 1.0))
    return band, True


def latin_hypercube(n: int, dims: int, rng: np.random.Generator) -> np.ndarray:
    """(n, dims) points in [0, 1): per axis, one point in each of n strata."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out = np.empty((n, dims))
    for d in range(dims):
        out[:, d] = (rng.permutation(n) + rng.random(n)) / n
    return out


def _lhs_pick(candidates: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Pick n rows from a candidate pixel list, LHS-stratified over the list index."""
    u = latin_hypercube(n, 1, rng)[:, 0]
    idx = np.minimum((u * len(candidates)).astype(np.int64), len(candidates) - 1)
    return candidates[idx]


def sample_points(
    mask: np.ndarray,
    config: SamplingConfig,
    num_classes: int | None = None,
    classes: list[int] | None = None,
) -> tuple[list[OccupancySample], SamplingReport]:
    """Draw the training point set for one label mask.

    Emits ``n_background`` background samples plus
    ``n_foreground_per_class`` samples for each present foreground class,
    ``floor(boundary_fraction * n)`` of which lie in that class's boundary
    band (the rest in the class interior). Deterministic given
    ``config.seed``. Requested classes absent from the mask are skipped
    and recorded in the report; a mask with no foreground is an error.
    """
    mask = np.asarray(mask)
    present = sorted(int(v) for v in np.unique(mask) if v != 0)
    if not present:
        raise ValueError("mask contains no foreground class")
    if classes is None:
        classes = present
    if num_classes is None:
        num_classes = max(max(present), max(classes, default=0)) + 1

    rng = np.random.default_rng(config.seed)
    report = SamplingReport()
    dims = mask.shape
    samples: list[OccupancySample] = []

    def emit(pixels: np.ndarray, label: int) -> None:
        coords = pixel_to_normalized(pixels, dims)
        if config.jitter:
            half = 1.0 / np.asarray(dims, dtype=np.float64)
            coords = coords + rng.uniform(-half, half, size=coords.shape)
        one_hot = np.zeros(num_classes, dtype=np.float64)
        one_hot[label] = 1.0
        for p in coords:
            samples.append(OccupancySample(p_s=p.copy(), p_i=p.copy(), occupancy=one_hot.copy()))
        report.counts[label] = report.counts.get(label, 0) + len(pixels)

    if config.n_background > 0:
        bg = np.argwhere(mask == 0)
        if len(bg) == 0:
            report.warnings.append("no background pixels; background samples skipped")
        else:
            emit(_lhs_pick(bg, config.n_background, rng), 0)

    n_fg = config.n_foreground_per_class
    for cls in classes:
        if cls not in present:
            report.skipped_classes.append(cls)
            continue
        if n_fg == 0:
            continue
        band, _ = boundary_band(mask, cls, config.boundary_band)
        n_band = int(np.floor(config.boundary_fraction * n_fg))
        interior = (mask == cls) & ~band
        if n_band > 0:
            emit(_lhs_pick(np.argwhere(band), n_band, rng), cls)
            report.band_counts[cls] = n_band
        n_rest = n_fg - n_band
        if n_rest > 0:
            pool = np.argwhere(interior)
            if len(pool) == 0:
                report.warnings.append(
                    f"class {cls}: interior empty, drawing non-band samples from the band"
                )
                pool = np.argwhere(mask == cls)
            emit(_lhs_pick(pool, n_rest, rng), cls)

    return samples, report


# ---------------------------------------------------------------------------
# point-set files: one columnar text file + JSON sidecar per image

POINTS_HEADER = "p_s_y p_s_x p_i_y p_i_x label"


def save_points(
    path: str | Path,
    samples: list[OccupancySample],
    config: SamplingConfig,
    report: SamplingReport | None = None,
    num_classes: int | None = None,
) -> None:
    path = Path(path)
    if num_classes is None:
        num_classes = len(samples[0].occupancy) if samples else 2
    rows = np.array(
        [[*s.p_s, *s.p_i, s.label] for s in samples], dtype=np.float64
    ).reshape(-1, 5)
    np.savetxt(path, rows, fmt="%.17g %.17g %.17g %.17g %d", header=POINTS_HEADER)
    sidecar = {
        "config": asdict(config),
        "seed": config.seed,
        "num_classes": num_classes,
        "skipped_classes": report.skipped_classes if report else [],
        "warnings": report.warnings if report else [],
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))


def load_points(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """Read a point file -> (p_s (N,2), p_i (N,2), labels (N,), num_classes)."""
    path = Path(path)
    rows = np.loadtxt(path, ndmin=2)
    sidecar_path = path.with_suffix(".json")
    if sidecar_path.exists():
        num_classes = int(json.loads(sidecar_path.read_text())["num_classes"])
    else:
        num_classes = int(rows[:, 4].max()) + 1 if len(rows) else 2
    return rows[:, 0:2], rows[:, 2:4], rows[:, 4].astype(np.int64), num_classes


def labels_to_one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes), dtype=np.float64)
    out[np.arange(len(labels)), labels] = 1.0
    return out
