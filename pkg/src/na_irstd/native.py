"""Native-resolution branch: patchwise convolution plus global mixing over patch tokens."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .lattice import LatticeSpec, partition


def _norm(channels: int) -> nn.GroupNorm:
    # per-sample normalization: train and eval forward passes agree
    groups = math.gcd(channels, 8)
    return nn.GroupNorm(groups, channels)


class PatchDetailExtractor(nn.Module):
    """Shared stride-1 conv encoder applied to every patch independently.

    Input and output are ``(B*N, C, P, P)``; spatial size never changes.
    """

    def __init__(self, in_channels: int, out_channels: int, num_blocks: int = 2):
        super().__init__()
        layers: list[nn.Module] = []
        c = in_channels
        for _ in range(num_blocks):
            layers += [nn.Conv2d(c, out_channels, 3, stride=1, padding=1), _norm(out_channels), nn.GELU()]
            c = out_channels
        self.body = nn.Sequential(*layers)
        self.out_channels = out_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[-1] != x.shape[-2]:
            raise ValueError(f"expected (B*N, C, P, P) patches, got {tuple(x.shape)}")
        return self.body(x)


def pool_tokens(x: torch.Tensor) -> torch.Tensor:
    """Spatial mean of each patch: ``(…, C, P, P) -> (…, C)``."""
    return x.mean(dim=(-2, -1))


def gpm_residual(z: torch.Tensor, z_gpm: torch.Tensor) -> torch.Tensor:
    if z.shape != z_gpm.shape:
        raise ValueError(f"token shapes differ: {tuple(z.shape)} vs {tuple(z_gpm.shape)}")
    return z + z_gpm


class GlobalPatchMixer(nn.Module):
    """Self-attention across the N pooled patch tokens (never across pixels).

    No positional encoding is added, so the mixer is permutation-equivariant
    over the patch axis.
    """

    def __init__(self, dim: int, num_heads: int = 1):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.last_attention: torch.Tensor | None = None

    def forward(self, z: torch.Tensor, keep_attention: bool = False) -> torch.Tensor:
        b, n, d = z.shape
        h = self.num_heads
        dk = d // h
        q = self.q(z).view(b, n, h, dk).transpose(1, 2)
        k = self.k(z).view(b, n, h, dk).transpose(1, 2)
        v = self.v(z).view(b, n, h, dk).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(dk), dim=-1)
        assert attn.shape[-2:] == (n, n), "patch mixer attention must be N x N over tokens"
        self.last_attention = attn.detach() if keep_attention else None
        return (attn @ v).transpose(1, 2).reshape(b, n, d)


class PDCEStage(nn.Module):
    """One detail-context stage.

    Returns spatial features ``(B, N, D, P, P)`` and tokens ``(B, N, D)``. The
    attention delta ``Z_out - Z`` is broadcast back over each patch's P x P
    positions, so spatially pooling the features recovers ``Z_out`` exactly.
    """

    def __init__(self, in_channels: int, out_channels: int, num_heads: int = 1, num_blocks: int = 2):
        super().__init__()
        self.pde = PatchDetailExtractor(in_channels, out_channels, num_blocks)
        self.gpm = GlobalPatchMixer(out_channels, num_heads)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b, n, c, p, _ = x.shape
        detail = self.pde(x.reshape(b * n, c, p, p))
        detail = detail.view(b, n, -1, p, p)
        z = pool_tokens(detail)
        z_gpm = self.gpm(z)
        z_out = gpm_residual(z, z_gpm)
        feats = detail + z_gpm[..., None, None]
        return feats, z_out


@dataclass
class NativeFeaturePyramid:
    features: list[torch.Tensor]  # per stage (B, N, D_l, P, P)
    tokens: list[torch.Tensor]  # per stage (B, N, D_l)

    @property
    def num_stages(self) -> int:
        return len(self.features)


class NativeBranch(nn.Module):
    """Chain of PDCE stages over the patch lattice of a full-resolution image."""

    def __init__(
        self,
        lattice: LatticeSpec,
        in_channels: int = 3,
        widths: Sequence[int] = (16, 32, 64, 64),
        num_heads: int = 1,
        blocks_per_stage: int = 2,
    ):
        super().__init__()
        self.lattice = lattice
        self.widths = tuple(widths)
        chans = (in_channels, *self.widths)
        self.stages = nn.ModuleList(
            PDCEStage(chans[i], chans[i + 1], num_heads, blocks_per_stage) for i in range(len(self.widths))
        )

    def forward(self, image: torch.Tensor) -> NativeFeaturePyramid:
        x = partition(image, self.lattice)
        if x.dim() == 4:
            x = x.unsqueeze(0)
        feats, toks = [], []
        for stage in self.stages:
            x, z = stage(x)
            feats.append(x)
            toks.append(z)
        return NativeFeaturePyramid(feats, toks)


def count_attention_tokens(lattice: LatticeSpec) -> tuple[int, int]:
    """(patch tokens attended by the mixer, pixel tokens dense attention would need)."""
    return lattice.num_patches, lattice.height * lattice.width
