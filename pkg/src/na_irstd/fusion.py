"""Hierarchical encoder, patch-aligned cross-scale injection and decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .lattice import LatticeError, merge_semantic, partition_semantic
from .native import _norm
from .relevance import gather_patches


def _conv_block(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=stride, padding=1), _norm(cout), nn.GELU())


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm1 = _norm(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = _norm(channels)

    def forward(self, x):
        y = F.gelu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return F.gelu(x + y)


@dataclass
class StagePyramid:
    features: list[torch.Tensor]  # per stage (B, C_l, H/s_l, W/s_l)
    factors: tuple[int, ...]

    @property
    def num_stages(self) -> int:
        return len(self.features)


class HierarchicalEncoder(nn.Module):
    """Residual conv stages, each halving the resolution: factors 2, 4, 8, 16, ..."""

    def __init__(self, in_channels: int = 3, widths: Sequence[int] = (32, 64, 128, 256)):
        super().__init__()
        self.widths = tuple(widths)
        self.factors = tuple(2 ** (i + 1) for i in range(len(self.widths)))
        chans = (in_channels, *self.widths)
        self.stages = nn.ModuleList(
            nn.Sequential(_conv_block(chans[i], chans[i + 1], stride=2), ResidualBlock(chans[i + 1]))
            for i in range(len(self.widths))
        )

    def forward(self, image: torch.Tensor) -> StagePyramid:
        h, w = image.shape[-2:]
        if h % self.factors[-1] or w % self.factors[-1]:
            raise ValueError(f"input {h}x{w} not divisible by the deepest factor {self.factors[-1]}")
        feats = []
        x = image
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return StagePyramid(feats, self.factors)


def _check_indices(indices: torch.Tensor, num_windows: int):
    if indices.numel() and (indices.min() < 0 or indices.max() >= num_windows):
        raise LatticeError(f"patch indices must lie in [0, {num_windows})")


def gather_semantic(feature: torch.Tensor, indices: torch.Tensor, window: int) -> torch.Tensor:
    """Exact ``window x window`` regions of lattice patches ``indices``: ``(B, K, C, P', P')``."""
    windows = partition_semantic(feature, window)
    _check_indices(indices, windows.shape[1])
    return gather_patches(windows, indices)


def scatter_back(feature: torch.Tensor, regions: torch.Tensor, indices: torch.Tensor, window: int) -> torch.Tensor:
    """Write ``regions`` into the windows ``indices`` of ``feature``; everything else is copied unchanged."""
    windows = partition_semantic(feature, window)
    _check_indices(indices, windows.shape[1])
    if regions.shape[:2] != indices.shape or regions.shape[2:] != windows.shape[2:]:
        raise LatticeError(
            f"regions {tuple(regions.shape)} do not match indices {tuple(indices.shape)} "
            f"and windows {tuple(windows.shape[2:])}"
        )
    if indices.shape[1] == 0:
        return feature
    batch = torch.arange(feature.shape[0], device=feature.device)[:, None].expand_as(indices)
    windows = windows.index_put((batch, indices), regions)
    gh = feature.shape[-2] // window
    gw = feature.shape[-1] // window
    return merge_semantic(windows, gh, gw)


class CrossScaleInjection(nn.Module):
    """Per-region cross-attention from a semantic window to its native patch.

    Queries are the ``P'^2`` semantic positions of a region, keys and values the
    ``P^2`` positions of the matching native patch after a 1x1 channel
    projection. Regions never attend to each other. The residual gain
    ``alpha`` starts at zero.
    """

    def __init__(self, native_channels: int, semantic_channels: int):
        super().__init__()
        c = semantic_channels
        self.proj = nn.Conv2d(native_channels, c, 1)
        self.q = nn.Linear(c, c)
        self.k = nn.Linear(c, c)
        self.v = nn.Linear(c, c)
        self.alpha = nn.Parameter(torch.zeros(()))
        self.last_attention: torch.Tensor | None = None

    def project_native(self, native: torch.Tensor) -> torch.Tensor:
        b, k, d, p, _ = native.shape
        return self.proj(native.reshape(b * k, d, p, p)).view(b, k, -1, p, p)

    def cross_attention(self, sem: torch.Tensor, native: torch.Tensor, keep_attention: bool = False) -> torch.Tensor:
        b, k, c, w, _ = sem.shape
        queries = sem.reshape(b * k, c, w * w).transpose(1, 2)
        keys = native.reshape(b * k, c, -1).transpose(1, 2)
        attn = torch.softmax(self.q(queries) @ self.k(keys).transpose(1, 2) / math.sqrt(c), dim=-1)
        self.last_attention = attn.detach() if keep_attention else None
        out = attn @ self.v(keys)
        return out.transpose(1, 2).reshape(b, k, c, w, w)

    def forward(self, sem: torch.Tensor, native: torch.Tensor, keep_attention: bool = False) -> torch.Tensor:
        if sem.shape[:2] != native.shape[:2]:
            raise ValueError(f"semantic regions {tuple(sem.shape[:2])} vs native patches {tuple(native.shape[:2])}")
        projected = self.project_native(native)
        return sem + self.alpha * self.cross_attention(sem, projected, keep_attention)


class TopDownDecoder(nn.Module):
    """Top-down pathway with nearest 2x upsampling and 1x1 lateral fusions.

    The stride-1 head at H x W also sees the input image, so boundaries can be
    placed at single-pixel precision. The output bias starts at the logit of
    ``prior``.
    """

    def __init__(self, widths: Sequence[int], width: int = 32, in_channels: int = 3, head_width: int | None = None,
                 prior: float = 0.01):
        super().__init__()
        head_width = head_width or width
        self.laterals = nn.ModuleList(nn.Conv2d(c, width, 1) for c in widths)
        self.smooth = _conv_block(width, width)
        self.head = nn.Sequential(
            _conv_block(width + in_channels, head_width),
            nn.Conv2d(head_width, 1, 3, padding=1),
        )
        # start near the foreground rate instead of p = 0.5 everywhere
        nn.init.constant_(self.head[-1].bias, math.log(prior / (1 - prior)))
        self.num_stages = len(widths)

    def forward(self, features: Sequence[torch.Tensor], image: torch.Tensor) -> torch.Tensor:
        if len(features) != self.num_stages:
            raise ValueError(f"decoder needs {self.num_stages} stages, got {len(features)}")
        y = self.laterals[-1](features[-1])
        for lateral, f in zip(reversed(self.laterals[:-1]), reversed(features[:-1])):
            y = F.interpolate(y, scale_factor=2, mode="nearest") + lateral(f)
        y = self.smooth(y)
        y = F.interpolate(y, size=image.shape[-2:], mode="nearest")
        return self.head(torch.cat([y, image], dim=1))
