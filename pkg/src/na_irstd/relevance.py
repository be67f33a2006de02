"""Patch relevance supervision, scoring and hard Top-K selection."""

from __future__ import annotations

import logging
import math
import warnings
from fractions import Fraction
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
from scipy import ndimage

from .lattice import LatticeSpec

logger = logging.getLogger(__name__)

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)
PROB_FLOOR = 1e-7


def target_centers(mask: np.ndarray) -> list[tuple[int, int]]:
    """One ``(row, col)`` center per 8-connected component, at its rounded centroid.

    Rounding is half-up so that a centroid at ``x.5`` maps to ``x + 1``.
    """
    mask = np.asarray(mask) > 0
    labels, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
    if n == 0:
        return []
    centroids = ndimage.center_of_mass(mask, labels, range(1, n + 1))
    return [(int(math.floor(r + 0.5)), int(math.floor(c + 0.5))) for r, c in centroids]


def soft_label_field(centers: Sequence[tuple[int, int]], sigma: float, height: int, width: int) -> np.ndarray:
    """Gaussian weight of each pixel w.r.t. its nearest target center.

    ``w = exp(-d_min^2 / (2 sigma^2))``; with no centers the field is all zeros.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if len(centers) == 0:
        return np.zeros((height, width), dtype=np.float64)
    rows = np.arange(height, dtype=np.float64)[:, None]
    cols = np.arange(width, dtype=np.float64)[None, :]
    d2 = np.full((height, width), np.inf)
    for r, c in centers:
        np.minimum(d2, (rows - r) ** 2 + (cols - c) ** 2, out=d2)
    return np.exp(-d2 / (2.0 * sigma**2))


def patch_means(field: np.ndarray, spec: LatticeSpec) -> np.ndarray:
    p = spec.patch_size
    if field.shape != (spec.height, spec.width):
        raise ValueError(f"field is {field.shape}, lattice expects {(spec.height, spec.width)}")
    return field.reshape(spec.grid_h, p, spec.grid_w, p).mean(axis=(1, 3)).reshape(-1)


def patch_soft_labels(field: np.ndarray, spec: LatticeSpec) -> np.ndarray:
    return patch_means(field, spec)


def patch_hard_labels(mask: np.ndarray, spec: LatticeSpec) -> np.ndarray:
    """1 for every patch holding at least one target pixel, else 0."""
    return (patch_means((np.asarray(mask) > 0).astype(np.float64), spec) > 0).astype(np.float64)


def mask_to_patch_labels(mask: np.ndarray, spec: LatticeSpec, sigma: float, mode: str = "soft") -> np.ndarray:
    if mode == "soft":
        field = soft_label_field(target_centers(mask), sigma, spec.height, spec.width)
        return patch_soft_labels(field, spec)
    if mode == "hard":
        return patch_hard_labels(mask, spec)
    raise ValueError(f"unknown label mode {mode!r}")


class RelevanceScorer(nn.Module):
    """Two-layer MLP mapping each patch token to a probability, shared across patches.

    The output bias starts at logit(prior) so training does not spend its first
    epochs pulling every score down to the base rate of relevant patches.
    """

    def __init__(self, dim: int, hidden: int | None = None, prior: float = 0.01):
        super().__init__()
        hidden = hidden or dim
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, 1))
        nn.init.constant_(self.mlp[-1].bias, math.log(prior / (1 - prior)))

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.mlp(tokens).squeeze(-1))


def score_loss(scores: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean soft-target BCE over patches (and batch)."""
    if scores.shape != targets.shape:
        raise ValueError(f"scores {tuple(scores.shape)} vs labels {tuple(targets.shape)}")
    s = scores.clamp(PROB_FLOOR, 1 - PROB_FLOOR)
    return -(targets * torch.log(s) + (1 - targets) * torch.log(1 - s)).mean()


def topk_select(scores: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the ``k`` highest scores, ascending, ties going to the lower index.

    Accepts ``(N,)`` or ``(B, N)``; the result carries no gradient.
    """
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    n = scores.shape[-1]
    if k > n:
        warnings.warn(f"K={k} exceeds the {n} available patches; selecting all of them", stacklevel=2)
        k = n
    order = torch.sort(scores.detach(), dim=-1, descending=True, stable=True).indices
    return torch.sort(order[..., :k], dim=-1).values


def gather_patches(features: torch.Tensor, indices: torch.Tensor) -> torch.Tensor:
    """``(B, N, …)`` features, ``(B, K)`` indices -> ``(B, K, …)``."""
    batch = torch.arange(features.shape[0], device=features.device)[:, None]
    return features[batch, indices]


def select_per_stage(features_per_stage: Sequence[torch.Tensor], scores: torch.Tensor, k: int):
    """One index set from the final-stage scores, reused to gather every stage."""
    idx = topk_select(scores, k)
    return idx, [gather_patches(f, idx) for f in features_per_stage]


def reduction_ratio(n: int, k: int) -> Fraction:
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= K <= N, got K={k}, N={n}")
    return 1 - Fraction(k, n)


def _center_patch_indices(mask: np.ndarray, spec: LatticeSpec) -> list[int]:
    p = spec.patch_size
    return [(r // p) * spec.grid_w + (c // p) for r, c in target_centers(mask)]


def coverage(selected: Sequence[int], mask: np.ndarray, spec: LatticeSpec) -> float | None:
    """Fraction of ground-truth targets whose center patch was selected.

    Returns None for images without targets so callers can skip them.
    """
    centers = _center_patch_indices(mask, spec)
    if not centers:
        return None
    chosen = set(int(j) for j in selected)
    return sum(j in chosen for j in centers) / len(centers)


def patch_precision(selected: Sequence[int], mask: np.ndarray, spec: LatticeSpec) -> float:
    """Fraction of selected patches that contain any target pixel."""
    hit = patch_hard_labels(mask, spec)
    selected = [int(j) for j in selected]
    if not selected:
        return 0.0
    return float(sum(hit[j] for j in selected)) / len(selected)
