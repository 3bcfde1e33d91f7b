"""Normalized coordinate system and patch grid arithmetic.

Conventions used across the package:

- A normalized coordinate has one component per raster axis, ordered like
  the raster axes themselves: component 0 is the row axis (height H),
  component 1 is the column axis (width W). Every component lies in
  [-1, 1].
- Pixel ``i`` of an axis with ``N`` pixels has its center at
  ``c = -1 + 2 * (i + 0.5) / N``. The map is affine and invertible, so
  coordinates carry resolution-free meaning: the same ``c`` addresses the
  same physical location at any raster size.
- The patch grid tiles the image with non-overlapping square cells of
  ``patch_size`` pixels; cells in the last row/column may be truncated by
  the image bounds. A coordinate exactly on an interior cell boundary
  belongs to the higher-index cell (plain floor arithmetic).

All functions are pure and operate on immutable values; they are safe to
call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from typing import NamedTuple

import numpy as np


class Connectivity(IntEnum):
    """Neighbor set definition on a 2D patch grid.

    FOUR counts cells sharing an edge; EIGHT adds the diagonal cells.
    FOUR neighborhoods are always a subset of EIGHT neighborhoods.
    """

    FOUR = 4
    EIGHT = 8


class PatchIndex(NamedTuple):
    row: int
    col: int


@dataclass(frozen=True)
class PatchGridSpec:
    """Patch grid over an ``image_height`` x ``image_width`` raster.

    ``patch_size`` is the cell edge length in pixels. The grid has
    ``ceil(H / S) * ceil(W / S)`` cells; edge cells are truncated when the
    image dimensions are not multiples of ``patch_size``.
    """

    image_height: int
    image_width: int
    patch_size: int

    def __post_init__(self) -> None:
        if self.image_height < 1 or self.image_width < 1:
            raise ValueError("image dimensions must be >= 1")
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if self.patch_size > min(self.image_height, self.image_width):
            raise ValueError(
                f"patch_size {self.patch_size} exceeds min image dim "
                f"{min(self.image_height, self.image_width)}"
            )

    @property
    def grid_rows(self) -> int:
        return math.ceil(self.image_height / self.patch_size)

    @property
    def grid_cols(self) -> int:
        return math.ceil(self.image_width / self.patch_size)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.grid_rows, self.grid_cols)

    @property
    def n_patches(self) -> int:
        return self.grid_rows * self.grid_cols

    @property
    def dims(self) -> tuple[int, int]:
        return (self.image_height, self.image_width)

    def cell_extent(self, index: PatchIndex) -> tuple[tuple[int, int], tuple[int, int]]:
        """Pixel extent of a cell as ((row_lo, row_hi), (col_lo, col_hi)), half-open."""
        self._check_index(index)
        r_lo = index.row * self.patch_size
        c_lo = index.col * self.patch_size
        r_hi = min(r_lo + self.patch_size, self.image_height)
        c_hi = min(c_lo + self.patch_size, self.image_width)
        return ((r_lo, r_hi), (c_lo, c_hi))

    def _check_index(self, index: PatchIndex) -> None:
        if not (0 <= index.row < self.grid_rows and 0 <= index.col < self.grid_cols):
            raise ValueError(f"patch index {tuple(index)} out of bounds for grid {self.shape}")


def pixel_to_normalized(pixel, dims) -> np.ndarray:
    """Map integer pixel indices to pixel-center normalized coordinates.

    ``pixel`` is a length-D index (or an array of shape (..., D));
    ``dims`` the raster size per axis, e.g. (H, W). Out-of-range indices
    raise ValueError.
    """
    idx = np.asarray(pixel)
    dims_a = np.asarray(dims, dtype=np.float64)
    if idx.shape[-1] != dims_a.shape[0]:
        raise ValueError(f"pixel has {idx.shape[-1]} components, dims has {dims_a.shape[0]}")
    if np.any(idx < 0) or np.any(idx >= np.asarray(dims)):
        raise ValueError(f"pixel index out of range for dims {tuple(dims)}")
    return -1.0 + 2.0 * (idx + 0.5) / dims_a


def normalized_to_pixel(coord, dims) -> np.ndarray:
    """Containing-pixel lookup: inverse of ``pixel_to_normalized`` on centers.

    Coordinates at exactly +1 clamp into the last pixel. Components outside
    [-1, 1] raise ValueError.
    """
    c = np.asarray(coord, dtype=np.float64)
    dims_a = np.asarray(dims)
    if np.any(c < -1.0) or np.any(c > 1.0):
        raise ValueError("normalized coordinate outside [-1, 1]")
    continuous = (c + 1.0) * dims_a / 2.0
    idx = np.floor(continuous).astype(np.int64)
    return np.minimum(idx, dims_a - 1)


def patch_of(p_i, grid: PatchGridSpec) -> PatchIndex:
    """Patch cell containing an image coordinate.

    Ties on interior cell boundaries go to the higher-index cell; +1
    clamps into the last cell.
    """
    pix = normalized_to_pixel(p_i, grid.dims)
    return PatchIndex(int(pix[0]) // grid.patch_size, int(pix[1]) // grid.patch_size)


def patch_of_batch(coords: np.ndarray, grid: PatchGridSpec) -> np.ndarray:
    """Vectorized ``patch_of``: (N, 2) coordinates -> (N, 2) int cell indices."""
    pix = normalized_to_pixel(coords, grid.dims)
    return pix // grid.patch_size


def center_of(index: PatchIndex, grid: PatchGridSpec) -> np.ndarray:
    """Normalized coordinate of a cell's geometric center.

    Edge cells truncated by the image bounds use the truncated extent's
    center, so the center always sits over real pixels.
    """
    (r_lo, r_hi), (c_lo, c_hi) = grid.cell_extent(index)
    # midpoint of the continuous pixel extent [lo, hi], mapped by c = -1 + 2u/N
    return np.array(
        [
            -1.0 + (r_lo + r_hi) / grid.image_height,
            -1.0 + (c_lo + c_hi) / grid.image_width,
        ]
    )


def centers_grid(grid: PatchGridSpec) -> np.ndarray:
    """All cell centers as a (grid_rows, grid_cols, 2) array."""
    out = np.empty((grid.grid_rows, grid.grid_cols, 2))
    for r in range(grid.grid_rows):
        for c in range(grid.grid_cols):
            out[r, c] = center_of(PatchIndex(r, c), grid)
    return out


def to_patch_local(p_i, center, scale=None) -> np.ndarray:
    """Re-express an image coordinate relative to a patch center: p - c.

    ``scale`` optionally multiplies each axis afterwards (e.g. H/S, W/S to
    stretch one cell onto [-1, 1]); the default is the raw difference.
    """
    local = np.asarray(p_i, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    if scale is not None:
        local = local * np.asarray(scale, dtype=np.float64)
    return local


_OFFSETS_FOUR = ((-1, 0), (0, -1), (0, 1), (1, 0))
_OFFSETS_EIGHT = tuple(
    (dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)
)


def neighbors(
    index: PatchIndex, grid: PatchGridSpec, con: Connectivity = Connectivity.EIGHT
) -> list[PatchIndex]:
    """In-bounds neighboring cells of ``index``, excluding the cell itself.

    Border cells return fewer neighbors. The order is fixed (row-major
    over offsets) so seeded draws over the result are reproducible.
    """
    grid._check_index(index)
    offsets = _OFFSETS_FOUR if con == Connectivity.FOUR else _OFFSETS_EIGHT
    out = []
    for dr, dc in offsets:
        r, c = index.row + dr, index.col + dc
        if 0 <= r < grid.grid_rows and 0 <= c < grid.grid_cols:
            out.append(PatchIndex(r, c))
    return out
