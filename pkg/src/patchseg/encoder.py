"""Image encoder: multi-scale backbone, context enrichment, and fusion into
a patch embedding grid plus one global image embedding.

Pipeline: a 5-stage residual CNN emits feature maps at strides 4/8/16/32;
each map passes through a multi-branch context block built from cheap
asymmetric convolutions; a top-down cascade brings every stage to stride 32
at a common width ``d``; the four stage maps are resized to the patch grid
shape and fused per position (softmax stage attention by default, plain
addition or concatenation as ablation variants). The global embedding is
the spatial mean of the deepest cascade output.

The context block is a lightweight stand-in: branch count, dilation rates,
and channel splits are our choices, constrained only by the asymmetric
multi-branch structure and the preserved spatial size.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

STAGE_COUNT = 4  # feature maps at strides 4, 8, 16, 32
OUTPUT_STRIDE = 32


def _group_norm(channels: int) -> nn.GroupNorm:
    # >= 2 channels per group so 1x1 maps still have defined statistics
    groups = next(g for g in (8, 4, 2, 1) if channels % g == 0 and channels // g >= 2)
    return nn.GroupNorm(groups, channels)


def init_fan_in_uniform(module: nn.Module) -> None:
    """Fan-in-scaled uniform weights, zero biases, for every conv/linear."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight.shape[1] * (
                m.weight.shape[2] * m.weight.shape[3] if m.weight.dim() == 4 else 1
            )
            bound = 1.0 / fan_in**0.5
            nn.init.uniform_(m.weight, -bound, bound)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm1 = _group_norm(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = _group_norm(channels)

    def forward(self, x):
        h = F.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return F.relu(x + h)


class Backbone(nn.Module):
    """5-stage fully convolutional encoder; returns the last four stages.

    Input must be divisible by 32; outputs have spatial sizes H/4 .. H/32
    and channel counts ``widths[1:]``.
    """

    def __init__(self, in_channels: int, widths: tuple[int, ...], blocks_per_stage: int = 2):
        super().__init__()
        if len(widths) != 5:
            raise ValueError("widths must list 5 stage channel counts")
        self.widths = tuple(widths)
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, widths[0], 3, stride=2, padding=1),
            _group_norm(widths[0]),
            nn.ReLU(),
        )
        self.stages = nn.ModuleList()
        for i in range(4):
            layers: list[nn.Module] = [
                nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1),
                _group_norm(widths[i + 1]),
                nn.ReLU(),
            ]
            layers += [ResidualBlock(widths[i + 1]) for _ in range(blocks_per_stage)]
            self.stages.append(nn.Sequential(*layers))

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.shape[-1] % OUTPUT_STRIDE or x.shape[-2] % OUTPUT_STRIDE:
            raise ValueError(f"input size {tuple(x.shape[-2:])} not divisible by {OUTPUT_STRIDE}")
        h = self.stem(x)
        out = []
        for stage in self.stages:
            h = stage(h)
            out.append(h)
        return out


class AsymmetricContextBlock(nn.Module):
    """Multi-branch context block with asymmetric (1xk + kx1) convolutions.

    Branches: a plain 1x1, plus three 1x1 -> (1x3, 3x1) pairs at dilations
    1, 2, 3. Branch outputs are concatenated, projected back to the input
    width, and added residually. Spatial size is preserved for any input.
    """

    def __init__(self, channels: int):
        super().__init__()
        branch_ch = max(channels // 4, 1)
        self.branch0 = nn.Conv2d(channels, branch_ch, 1)
        self.branches = nn.ModuleList()
        for d in (1, 2, 3):
            self.branches.append(
                nn.Sequential(
                    nn.Conv2d(channels, branch_ch, 1),
                    nn.ReLU(),
                    nn.Conv2d(branch_ch, branch_ch, (1, 3), padding=(0, d), dilation=(1, d)),
                    nn.Conv2d(branch_ch, branch_ch, (3, 1), padding=(d, 0), dilation=(d, 1)),
                    nn.ReLU(),
                )
            )
        self.project = nn.Conv2d(4 * branch_ch, channels, 1)
        self.norm = _group_norm(channels)

    def forward(self, x):
        feats = [self.branch0(x)] + [b(x) for b in self.branches]
        return F.relu(x + self.norm(self.project(torch.cat(feats, dim=1))))


class CascadeNeck(nn.Module):
    """Top-down aggregation to four stride-32 maps of width ``d``.

    The deepest stage seeds the chain; each shallower stage is pooled to
    stride 32, projected to ``d``, added to the running deep map, and mixed
    by a 3x3 convolution. Output n therefore depends only on stages n..5,
    so zeroing a shallow stage leaves the deeper outputs untouched.
    """

    def __init__(self, stage_channels: tuple[int, ...], d: int):
        super().__init__()
        self.context = nn.ModuleList(AsymmetricContextBlock(c) for c in stage_channels)
        self.project = nn.ModuleList(nn.Conv2d(c, d, 1) for c in stage_channels)
        self.mix = nn.ModuleList(nn.Conv2d(d, d, 3, padding=1) for _ in stage_channels)

    def forward(self, feats: list[torch.Tensor]) -> list[torch.Tensor]:
        enriched = [ctx(f) for ctx, f in zip(self.context, feats)]
        pooled = []
        for n, f in enumerate(enriched):
            factor = 2 ** (STAGE_COUNT - 1 - n)
            pooled.append(F.avg_pool2d(f, factor) if factor > 1 else f)
        out: list[torch.Tensor | None] = [None] * STAGE_COUNT
        deep = self.mix[-1](self.project[-1](pooled[-1]))
        out[-1] = deep
        for n in range(STAGE_COUNT - 2, -1, -1):
            deep = self.mix[n](self.project[n](pooled[n]) + deep)
            out[n] = deep
        return out  # type: ignore[return-value]


def resize_to_grid(x: torch.Tensor, grid_shape: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of (B, C, H, W) to the patch grid shape; exact
    passthrough when the shapes already match."""
    if tuple(x.shape[-2:]) == tuple(grid_shape):
        return x
    return F.interpolate(x, size=grid_shape, mode="bilinear", align_corners=False)


class StageAttentionFusion(nn.Module):
    """Softmax-weighted fusion of the four stage embeddings.

    Per position: a shared reducer maps each stage vector to d/2 (ReLU),
    the four reductions are concatenated and scored into a 4-way softmax
    distribution, and the output combines the unweighted and the
    attention-weighted stage sums through a final linear layer.
    """

    def __init__(self, d: int):
        super().__init__()
        self.reduce = nn.Linear(d, d // 2)
        self.score = nn.Linear(4 * (d // 2), 4)
        self.out = nn.Linear(d, d)

    def forward(self, stages: torch.Tensor, weights_override: torch.Tensor | None = None):
        """stages: (..., 4, d) -> (fused (..., d), weights (..., 4))."""
        h = F.relu(self.reduce(stages))
        w = F.softmax(self.score(h.flatten(start_dim=-2)), dim=-1)
        if weights_override is not None:
            w = weights_override.expand_as(w)
        combined = stages.sum(dim=-2) + (w.unsqueeze(-1) * stages).sum(dim=-2)
        return self.out(combined), w


class AddFusion(nn.Module):
    """Ablation variant: plain elementwise sum of the stage embeddings."""

    def __init__(self, d: int):
        super().__init__()
        self.out = nn.Linear(d, d)

    def forward(self, stages, weights_override=None):
        return self.out(stages.sum(dim=-2)), None


class ConcatFusion(nn.Module):
    """Ablation variant: concatenation + linear projection."""

    def __init__(self, d: int):
        super().__init__()
        self.out = nn.Linear(4 * d, d)

    def forward(self, stages, weights_override=None):
        return self.out(stages.flatten(start_dim=-2)), None


FUSION_MODES = {"attention": StageAttentionFusion, "add": AddFusion, "concat": ConcatFusion}


def pool_image_embedding(deepest: torch.Tensor) -> torch.Tensor:
    """Global embedding: spatial mean of the deepest cascade map, (B, d)."""
    return deepest.mean(dim=(-2, -1))


class Encoder(nn.Module):
    """Full encoding pass: image -> (patch embedding grid, image embedding).

    One forward per image regardless of how many points are decoded later.
    """

    def __init__(
        self,
        in_channels: int = 1,
        widths: tuple[int, ...] = (16, 32, 48, 64, 96),
        blocks_per_stage: int = 2,
        d: int = 128,
        patch_size: int = 32,
        fusion: str = "attention",
    ):
        super().__init__()
        if fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {sorted(FUSION_MODES)}")
        self.d = d
        self.patch_size = patch_size
        self.fusion_mode = fusion
        self.backbone = Backbone(in_channels, widths, blocks_per_stage)
        self.neck = CascadeNeck(tuple(widths[1:]), d)
        self.fusion = FUSION_MODES[fusion](d)

    def grid_shape(self, height: int, width: int) -> tuple[int, int]:
        return (-(-height // self.patch_size), -(-width // self.patch_size))

    def forward(self, images: torch.Tensor, return_attention: bool = False):
        """images (B, C, H, W) -> Z_P (B, gr, gc, d), z_I (B, d)."""
        feats = self.backbone(images)
        cascade = self.neck(feats)
        z_image = pool_image_embedding(cascade[-1])
        grid = self.grid_shape(*images.shape[-2:])
        resized = [resize_to_grid(f, grid) for f in cascade]
        # (B, 4, d, gr, gc) -> (B, gr, gc, 4, d)
        stacked = torch.stack(resized, dim=1).permute(0, 3, 4, 1, 2)
        fused, weights = self.fusion(stacked)
        if return_attention:
            return fused, z_image, weights
        return fused, z_image
