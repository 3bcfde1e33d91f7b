"""Point-occupancy objectives.

All losses take one-hot targets ``o`` (N, C) and predicted probabilities
``o_hat`` (N, C) and reduce over the point batch:

- cross entropy: mean of -log(p at the target class), probabilities
  clamped below at 1e-12 so the loss stays finite as p -> 0
- smoothed Dice: 1 - (1/C) * sum_c (2*sum_i o*o_hat + 1) /
  (sum_i o^2 + sum_i o_hat^2 + 1), accumulated over the batch per class
- occupancy loss: the equal 0.5/0.5 blend of the two
- patch/image blend: alpha * occ(patch) + (1 - alpha) * occ(image)
- total: blend + beta * occ(overreach) + lambda * (mean |z_p|^2 + |z_i|^2),
  the regularizer averaged over embeddings the batch actually touched

Dice accumulates within one image's point batch; multi-image batches pass
``groups`` so each image is reduced separately before averaging.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

PROB_FLOOR = 1e-12


@dataclass
class LossConfig:
    alpha: float = 0.5  # local/global blend
    beta: float = 0.1  # overreach weight
    lam: float = 1e-4  # embedding L2 weight

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.beta < 0 or self.lam < 0:
            raise ValueError("beta and lambda must be >= 0")


@dataclass
class LossBreakdown:
    total: float
    pi: float
    patch: float
    image: float
    spo: float
    reg: float

    def csv_row(self, iteration: int) -> dict:
        return {
            "iteration": iteration,
            "L_total": self.total,
            "L_PI_patch": self.patch,
            "L_PI_image": self.image,
            "L_SPO": self.spo,
            "reg": self.reg,
        }


def ce_loss(o: torch.Tensor, o_hat: torch.Tensor) -> torch.Tensor:
    """Mean -log probability at the target class, clamped at 1e-12."""
    p = (o_hat * o).sum(dim=-1).clamp_min(PROB_FLOOR)
    return -torch.log(p).mean()


def dice_loss(o: torch.Tensor, o_hat: torch.Tensor, groups: torch.Tensor | None = None) -> torch.Tensor:
    """Smoothed Dice over the point batch, averaged over classes.

    ``groups`` (N,) optionally assigns each point to an image; the batch
    sums then accumulate per image and the result averages over images.
    """
    if o.numel() == 0:
        raise ValueError("dice_loss needs a non-empty batch")
    if groups is None:
        inter = (o * o_hat).sum(dim=0)
        denom = (o**2).sum(dim=0) + (o_hat**2).sum(dim=0)
        return (1.0 - ((2.0 * inter + 1.0) / (denom + 1.0)).mean()).to(o_hat.dtype)
    losses = []
    for g in torch.unique(groups):
        sel = groups == g
        losses.append(dice_loss(o[sel], o_hat[sel]))
    return torch.stack(losses).mean()


def occ_loss(o: torch.Tensor, o_hat: torch.Tensor, groups: torch.Tensor | None = None) -> torch.Tensor:
    """Equally weighted cross entropy + Dice."""
    return 0.5 * ce_loss(o, o_hat) + 0.5 * dice_loss(o, o_hat, groups)


def patch_image_loss(
    o: torch.Tensor,
    o_hat_patch: torch.Tensor,
    o_hat_image: torch.Tensor,
    alpha: float,
    groups: torch.Tensor | None = None,
) -> torch.Tensor:
    return alpha * occ_loss(o, o_hat_patch, groups) + (1.0 - alpha) * occ_loss(
        o, o_hat_image, groups
    )


def total_loss(
    o: torch.Tensor,
    o_hat_patch: torch.Tensor,
    o_hat_image: torch.Tensor,
    cfg: LossConfig,
    spo_o: torch.Tensor | None = None,
    spo_o_hat: torch.Tensor | None = None,
    z_patch: torch.Tensor | None = None,
    z_image: torch.Tensor | None = None,
    groups: torch.Tensor | None = None,
    spo_groups: torch.Tensor | None = None,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Full objective plus a per-term breakdown.

    ``z_patch`` holds the patch embeddings gathered for the batch (one row
    per point); the regularizer averages their squared norms and adds the
    (batch-averaged) squared norm of ``z_image``.
    """
    l_patch = occ_loss(o, o_hat_patch, groups)
    l_image = occ_loss(o, o_hat_image, groups)
    l_pi = cfg.alpha * l_patch + (1.0 - cfg.alpha) * l_image

    if spo_o is not None and spo_o.numel() > 0:
        l_spo = occ_loss(spo_o, spo_o_hat, spo_groups)
    else:
        l_spo = torch.zeros((), dtype=o_hat_patch.dtype, device=o_hat_patch.device)

    reg = torch.zeros((), dtype=o_hat_patch.dtype, device=o_hat_patch.device)
    if z_patch is not None and z_patch.numel() > 0:
        reg = reg + (z_patch**2).sum(dim=-1).mean()
    if z_image is not None and z_image.numel() > 0:
        reg = reg + (z_image**2).sum(dim=-1).mean()

    total = l_pi + cfg.beta * l_spo + cfg.lam * reg
    breakdown = LossBreakdown(
        total=float(total.detach()),
        pi=float(l_pi.detach()),
        patch=float(l_patch.detach()),
        image=float(l_image.detach()),
        spo=float(l_spo.detach()),
        reg=float(reg.detach()),
    )
    return total, breakdown
