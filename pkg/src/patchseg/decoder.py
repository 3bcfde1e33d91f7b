"""Occupancy decoders and the stochastic neighbor-overreach perturbation.

Two small MLPs map coordinates plus shape embeddings to class occupancy
probabilities: the patch decoder sees the patch-local coordinate and patch
embedding (optionally conditioned on the image coordinate, image embedding,
and source coordinate, concatenated in that pinned order), while the image
decoder sees only the image coordinate and the global embedding.

The overreach perturbation re-expresses a training point relative to a
uniformly chosen neighboring patch (new embedding, new local coordinate)
while leaving its supervision target untouched; it trains each patch
embedding to stay coherent just beyond its own cell.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .geometry import (
    Connectivity,
    PatchGridSpec,
    PatchIndex,
    center_of,
    neighbors,
    patch_of,
)
from .sampling import OccupancySample


@dataclass
class OverreachConfig:
    """Neighbor-overreach settings: connectivity picks the neighbor set,
    occurrence is the number of perturbed copies per batch point."""

    connectivity: Connectivity = Connectivity.EIGHT
    occurrence: int = 1

    def __post_init__(self) -> None:
        if self.occurrence < 0:
            raise ValueError("occurrence must be >= 0")


@dataclass
class PatchDecoderInput:
    """One patch-decoder query; fields concatenate in the order
    (p_p, z_p, p_i, z_i, p_s), dropping the pieces a config disables."""

    p_p: torch.Tensor
    z_p: torch.Tensor
    p_i: torch.Tensor | None = None
    z_i: torch.Tensor | None = None
    p_s: torch.Tensor | None = None


def _fourier_features(coords: torch.Tensor, bands: int) -> torch.Tensor:
    """Optional frequency encoding: [p, sin(2^k pi p), cos(2^k pi p)]."""
    if bands == 0:
        return coords
    parts = [coords]
    for k in range(bands):
        parts.append(torch.sin(2.0**k * torch.pi * coords))
        parts.append(torch.cos(2.0**k * torch.pi * coords))
    return torch.cat(parts, dim=-1)


class OccupancyMLP(nn.Module):
    """ReLU MLP emitting class probabilities.

    ``head="softmax"`` outputs a distribution over ``num_classes``;
    ``head="sigmoid"`` is the binary parity mode: one logit, expanded to
    two columns (1-p, p) so downstream loss code is uniform.
    """

    def __init__(self, in_dim: int, hidden: tuple[int, ...], num_classes: int, head: str = "softmax"):
        super().__init__()
        if head not in ("softmax", "sigmoid"):
            raise ValueError("head must be 'softmax' or 'sigmoid'")
        if head == "sigmoid" and num_classes != 2:
            raise ValueError("sigmoid head is binary-only (num_classes must be 2)")
        self.head = head
        self.num_classes = num_classes
        out_dim = 1 if head == "sigmoid" else num_classes
        dims = [in_dim, *hidden]
        self.layers = nn.ModuleList(nn.Linear(dims[i], dims[i + 1]) for i in range(len(hidden)))
        self.out = nn.Linear(dims[-1], out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            x = F.relu(layer(x))
        logits = self.out(x)
        if self.head == "sigmoid":
            p = torch.sigmoid(logits)
            return torch.cat([1.0 - p, p], dim=-1)
        return F.softmax(logits, dim=-1)


class PatchDecoder(nn.Module):
    """Patch-level occupancy decoder.

    The input width is fixed at construction from the enabled conditioning
    pieces; mismatched queries fail the assembly check, never mid-MLP.
    With ``global_cond=False`` the decoder is a pure function of
    (p_p, z_p).
    """

    def __init__(
        self,
        d: int,
        coord_dim: int = 2,
        hidden: tuple[int, ...] = (256, 256, 256),
        num_classes: int = 2,
        head: str = "softmax",
        global_cond: bool = True,
        source_coord: bool = False,
        freq_bands: int = 0,
    ):
        super().__init__()
        self.d = d
        self.coord_dim = coord_dim
        self.global_cond = global_cond
        self.source_coord = source_coord
        self.freq_bands = freq_bands
        enc = coord_dim * (1 + 2 * freq_bands)
        in_dim = enc + d
        if global_cond:
            in_dim += enc + d
        if source_coord:
            in_dim += enc
        self.mlp = OccupancyMLP(in_dim, hidden, num_classes, head)

    def assemble(self, p_p, z_p, p_i=None, z_i=None, p_s=None) -> torch.Tensor:
        parts = [_fourier_features(p_p, self.freq_bands), z_p]
        if self.global_cond:
            if p_i is None or z_i is None:
                raise ValueError("decoder built with global conditioning: p_i and z_i required")
            parts += [_fourier_features(p_i, self.freq_bands), z_i]
        if self.source_coord:
            if p_s is None:
                raise ValueError("decoder built with source_coord: p_s required")
            parts.append(_fourier_features(p_s, self.freq_bands))
        return torch.cat(parts, dim=-1)

    def forward(self, p_p, z_p, p_i=None, z_i=None, p_s=None) -> torch.Tensor:
        return self.mlp(self.assemble(p_p, z_p, p_i, z_i, p_s))

    def decode(self, query: PatchDecoderInput) -> torch.Tensor:
        return self.forward(query.p_p, query.z_p, query.p_i, query.z_i, query.p_s)


class ImageDecoder(nn.Module):
    """Global occupancy decoder over (image coordinate, image embedding)."""

    def __init__(
        self,
        d: int,
        coord_dim: int = 2,
        hidden: tuple[int, ...] = (256, 128),
        num_classes: int = 2,
        head: str = "softmax",
        freq_bands: int = 0,
    ):
        super().__init__()
        self.freq_bands = freq_bands
        enc = coord_dim * (1 + 2 * freq_bands)
        self.mlp = OccupancyMLP(enc + d, hidden, num_classes, head)

    def forward(self, p_i: torch.Tensor, z_i: torch.Tensor) -> torch.Tensor:
        return self.mlp(torch.cat([_fourier_features(p_i, self.freq_bands), z_i], dim=-1))


# ---------------------------------------------------------------------------
# stochastic neighbor overreach

def spo_perturb(
    sample: OccupancySample,
    grid: PatchGridSpec,
    z_grid: torch.Tensor,
    cfg: OverreachConfig,
    rng: np.random.Generator,
    z_i: torch.Tensor | None = None,
) -> list[PatchDecoderInput]:
    """Perturbed decoder inputs for one sample; the target stays the
    sample's own occupancy.

    Each of the ``cfg.occurrence`` outputs swaps in a uniformly chosen
    neighbor's embedding and recomputes the local coordinate against that
    neighbor's center. A single-cell grid has no neighbors: returns an
    empty list with a warning.
    """
    cell = patch_of(sample.p_i, grid)
    nbrs = neighbors(cell, grid, cfg.connectivity)
    if not nbrs:
        warnings.warn("patch grid has a single cell; overreach is inert", stacklevel=2)
        return []
    p_i = torch.as_tensor(sample.p_i, dtype=z_grid.dtype)
    p_s = torch.as_tensor(sample.p_s, dtype=z_grid.dtype)
    out = []
    for _ in range(cfg.occurrence):
        pick = nbrs[int(rng.integers(len(nbrs)))]
        new_center = torch.as_tensor(center_of(pick, grid), dtype=z_grid.dtype)
        out.append(
            PatchDecoderInput(
                p_p=p_i - new_center,
                z_p=z_grid[pick.row, pick.col],
                p_i=p_i,
                z_i=z_i,
                p_s=p_s,
            )
        )
    return out


def neighbor_table(grid: PatchGridSpec, con: Connectivity) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell neighbor lookup: (grid_rows, grid_cols, max_n, 2) padded
    index table plus a (grid_rows, grid_cols) count array."""
    max_n = int(con)
    table = np.zeros((grid.grid_rows, grid.grid_cols, max_n, 2), dtype=np.int64)
    counts = np.zeros((grid.grid_rows, grid.grid_cols), dtype=np.int64)
    for r in range(grid.grid_rows):
        for c in range(grid.grid_cols):
            nbrs = neighbors(PatchIndex(r, c), grid, con)
            counts[r, c] = len(nbrs)
            for k, nb in enumerate(nbrs):
                table[r, c, k] = nb
    return table, counts


def sample_overreach_batch(
    cells: np.ndarray,
    grid: PatchGridSpec,
    cfg: OverreachConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized neighbor draw for a batch of points.

    ``cells`` is (N, 2) patch indices; returns (point_ids (N*occ,),
    neighbor_cells (N*occ, 2)), each point repeated ``cfg.occurrence``
    times with an independently drawn uniform neighbor.
    """
    if cfg.occurrence == 0 or len(cells) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 2), dtype=np.int64)
    table, counts = neighbor_table(grid, cfg.connectivity)
    point_ids = np.repeat(np.arange(len(cells)), cfg.occurrence)
    rep = cells[point_ids]
    n_choices = counts[rep[:, 0], rep[:, 1]]
    if np.any(n_choices == 0):
        warnings.warn("patch grid has a single cell; overreach is inert", stacklevel=2)
        keep = n_choices > 0
        point_ids, rep, n_choices = point_ids[keep], rep[keep], n_choices[keep]
    draw = (rng.random(len(rep)) * n_choices).astype(np.int64)
    picked = table[rep[:, 0], rep[:, 1], draw]
    return point_ids, picked
