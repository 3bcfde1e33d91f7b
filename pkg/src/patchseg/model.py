"""Full model assembly and checkpoint files.

``SegmentationModel`` bundles the encoder with the patch and image
decoders, and provides the batched point path used by training and
inference: given encoded images and per-image query coordinates it gathers
each point's patch embedding and local coordinate (torch mirror of the
numpy grid arithmetic in :mod:`patchseg.geometry`) and decodes both heads.

Checkpoints are a torch tensor container (state dict + config) next to a
JSON metadata sidecar holding everything needed to rebuild and audit the
run: architecture config, seed, iteration count, loss config, init scheme.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
from torch import nn

from .decoder import ImageDecoder, PatchDecoder
from .encoder import Encoder, init_fan_in_uniform
from .geometry import PatchGridSpec

INIT_SCHEME = "fan_in_uniform_zero_bias"


@dataclass
class ModelConfig:
    in_channels: int = 1
    num_classes: int = 2
    d: int = 128
    patch_size: int = 32
    widths: tuple[int, ...] = (16, 32, 48, 64, 96)
    blocks_per_stage: int = 2
    fusion: str = "attention"  # attention | add | concat
    patch_hidden: tuple[int, ...] = (256, 256, 256)
    image_hidden: tuple[int, ...] = (256, 128)
    head: str = "softmax"
    global_cond: bool = True
    source_coord: bool = False
    rescale_local: bool = False  # stretch p_p by (H/S, W/S)
    freq_bands: int = 0
    input_policy: str = "reject"  # reject | resize (non /32 inputs)

    def __post_init__(self) -> None:
        self.widths = tuple(self.widths)
        self.patch_hidden = tuple(self.patch_hidden)
        self.image_hidden = tuple(self.image_hidden)
        if self.input_policy not in ("reject", "resize"):
            raise ValueError("input_policy must be 'reject' or 'resize'")


def grid_cells(coords: torch.Tensor, grid: PatchGridSpec) -> torch.Tensor:
    """Torch mirror of patch_of_batch: (..., 2) coords -> (..., 2) cells."""
    dims = torch.tensor(grid.dims, dtype=coords.dtype, device=coords.device)
    pix = torch.floor((coords + 1.0) * dims / 2.0).long()
    pix = torch.minimum(pix, torch.tensor(grid.dims, device=coords.device) - 1).clamp_min(0)
    return pix // grid.patch_size


def cell_centers(cells: torch.Tensor, grid: PatchGridSpec) -> torch.Tensor:
    """Torch mirror of center_of for (..., 2) integer cell indices."""
    s = grid.patch_size
    dims = torch.tensor(grid.dims, device=cells.device)
    lo = cells * s
    hi = torch.minimum(lo + s, dims)
    return -1.0 + (lo + hi).double() / dims.double()


class SegmentationModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(
            in_channels=config.in_channels,
            widths=config.widths,
            blocks_per_stage=config.blocks_per_stage,
            d=config.d,
            patch_size=config.patch_size,
            fusion=config.fusion,
        )
        self.patch_decoder = PatchDecoder(
            d=config.d,
            hidden=config.patch_hidden,
            num_classes=config.num_classes,
            head=config.head,
            global_cond=config.global_cond,
            source_coord=config.source_coord,
            freq_bands=config.freq_bands,
        )
        self.image_decoder = ImageDecoder(
            d=config.d,
            hidden=config.image_hidden,
            num_classes=config.num_classes,
            head=config.head,
            freq_bands=config.freq_bands,
        )
        init_fan_in_uniform(self)

    def grid_for(self, height: int, width: int) -> PatchGridSpec:
        return PatchGridSpec(height, width, self.config.patch_size)

    def prepare_images(self, images: torch.Tensor) -> torch.Tensor:
        h, w = images.shape[-2:]
        if h % 32 == 0 and w % 32 == 0:
            return images
        if self.config.input_policy == "reject":
            raise ValueError(f"input size {(h, w)} not divisible by 32 (input_policy='reject')")
        new_h, new_w = -(-h // 32) * 32, -(-w // 32) * 32
        return torch.nn.functional.interpolate(
            images, size=(new_h, new_w), mode="bilinear", align_corners=False
        )

    def encode(self, images: torch.Tensor):
        """(B, C, H, W) -> (Z_P (B, gr, gc, d), z_I (B, d))."""
        return self.encoder(self.prepare_images(images))

    def local_scale(self, grid: PatchGridSpec, like: torch.Tensor) -> torch.Tensor | None:
        if not self.config.rescale_local:
            return None
        return torch.tensor(
            [grid.image_height / grid.patch_size, grid.image_width / grid.patch_size],
            dtype=like.dtype,
            device=like.device,
        )

    def gather_point_conditioning(
        self,
        z_grid: torch.Tensor,
        coords: torch.Tensor,
        grid: PatchGridSpec,
        cells: torch.Tensor | None = None,
    ):
        """Per-point patch conditioning.

        ``z_grid`` (B, gr, gc, d), ``coords`` (B, P, 2) image coordinates,
        optional precomputed ``cells`` (B, P, 2) to decode against a cell
        other than the containing one (overreach). Returns
        (p_p (B, P, 2), z_p (B, P, d)).
        """
        if cells is None:
            cells = grid_cells(coords, grid)
        centers = cell_centers(cells, grid).to(coords.dtype)
        p_p = coords - centers
        scale = self.local_scale(grid, coords)
        if scale is not None:
            p_p = p_p * scale
        batch = torch.arange(z_grid.shape[0], device=z_grid.device).view(-1, 1)
        z_p = z_grid[batch, cells[..., 0], cells[..., 1]]
        return p_p, z_p

    def decode_points(
        self,
        z_grid: torch.Tensor,
        z_image: torch.Tensor,
        coords: torch.Tensor,
        grid: PatchGridSpec,
        p_s: torch.Tensor | None = None,
        cells: torch.Tensor | None = None,
    ):
        """Decode both heads at (B, P, 2) image coordinates.

        Returns (patch probs (B, P, C), image probs (B, P, C),
        gathered z_p (B, P, d)).
        """
        p_p, z_p = self.gather_point_conditioning(z_grid, coords, grid, cells)
        z_i = z_image.unsqueeze(1).expand(-1, coords.shape[1], -1)
        probs_patch = self.patch_decoder(
            p_p,
            z_p,
            coords if self.config.global_cond else None,
            z_i if self.config.global_cond else None,
            p_s if self.config.source_coord else None,
        )
        probs_image = self.image_decoder(coords, z_i)
        return probs_patch, probs_image, z_p


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path: str | Path, model: SegmentationModel, metadata: dict | None = None) -> None:
    path = Path(path)
    torch.save({"state_dict": model.state_dict(), "config": asdict(model.config)}, path)
    meta = {
        "config": asdict(model.config),
        "init_scheme": INIT_SCHEME,
        **(metadata or {}),
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, default=str))


def load_checkpoint(path: str | Path) -> tuple[SegmentationModel, dict]:
    path = Path(path)
    payload = torch.load(path, map_location="cpu", weights_only=True)
    model = SegmentationModel(ModelConfig(**payload["config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    sidecar = path.with_suffix(".json")
    metadata = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return model, metadata
