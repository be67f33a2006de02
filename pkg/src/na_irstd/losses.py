"""Segmentation losses on probability maps."""

from __future__ import annotations

import torch
import torch.nn.functional as F

PROB_FLOOR = 1e-7
DICE_EPS = 1e-6


def bce_loss(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Pixel BCE, summed then divided by the pixel count."""
    p = p.clamp(PROB_FLOOR, 1 - PROB_FLOOR)
    total = -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).sum()
    return total / p.numel()


def dice_loss(p: torch.Tensor, y: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """Soft Dice, computed per sample over all but the leading axis and averaged.

    1-D inputs are treated as a single sample.
    """
    if p.dim() <= 1:
        p, y = p.reshape(1, -1), y.reshape(1, -1)
    p = p.reshape(p.shape[0], -1)
    y = y.reshape(y.shape[0], -1)
    inter = (p * y).sum(1)
    dice = (2 * inter + eps) / (p.sum(1) + y.sum(1) + eps)
    return (1 - dice).mean()


def seg_loss(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return bce_loss(p, y) + dice_loss(p, y)


def seg_loss_with_logits(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Same objective as :func:`seg_loss`, with the BCE term taken from logits for stability."""
    return F.binary_cross_entropy_with_logits(logits, y) + dice_loss(torch.sigmoid(logits), y)
