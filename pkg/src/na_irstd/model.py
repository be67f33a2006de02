"""Full detector: native branch + relevance scorer + backbone, injection and decoder."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import torch
import torch.nn as nn

from .fusion import CrossScaleInjection, HierarchicalEncoder, TopDownDecoder, gather_semantic, scatter_back
from .lattice import LatticeSpec
from .native import NativeBranch
from .relevance import RelevanceScorer, gather_patches, topk_select


@dataclass
class ModelConfig:
    image_size: int = 256
    patch_size: int = 32
    in_channels: int = 3
    native_widths: list[int] = field(default_factory=lambda: [16, 32, 64, 64])
    native_blocks: int = 2
    gpm_heads: int = 1
    scorer_hidden: int | None = None
    backbone_widths: list[int] = field(default_factory=lambda: [32, 64, 128, 256])
    decoder_width: int = 32
    head_width: int | None = None

    def lattice(self) -> LatticeSpec:
        return LatticeSpec(self.image_size, self.image_size, self.patch_size)


def to_model_input(images: torch.Tensor, in_channels: int) -> torch.Tensor:
    """Grayscale ``(B, 1, H, W)`` (or ``(B, H, W)``) replicated to ``in_channels``."""
    if images.dim() == 3:
        images = images.unsqueeze(1)
    if images.shape[1] == 1 and in_channels > 1:
        images = images.expand(-1, in_channels, -1, -1)
    return images


class RelevanceNet(nn.Module):
    """Native branch plus scoring head: everything that exists during stage 1."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.lattice = cfg.lattice()
        self.native = NativeBranch(
            self.lattice, cfg.in_channels, cfg.native_widths, cfg.gpm_heads, cfg.native_blocks
        )
        self.scorer = RelevanceScorer(cfg.native_widths[-1], cfg.scorer_hidden)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        pyramid = self.native(to_model_input(images, self.cfg.in_channels))
        return self.scorer(pyramid.tokens[-1])


class Prediction(NamedTuple):
    logits: torch.Tensor
    scores: torch.Tensor | None
    indices: torch.Tensor | None


class NaIRSTD(nn.Module):
    def __init__(self, cfg: ModelConfig, k: int = 5):
        super().__init__()
        if len(cfg.native_widths) != len(cfg.backbone_widths):
            raise ValueError("native branch and backbone need the same number of stages")
        self.cfg = cfg
        self.k = k
        self.lattice = cfg.lattice()
        self.native = NativeBranch(
            self.lattice, cfg.in_channels, cfg.native_widths, cfg.gpm_heads, cfg.native_blocks
        )
        self.scorer = RelevanceScorer(cfg.native_widths[-1], cfg.scorer_hidden)
        self.encoder = HierarchicalEncoder(cfg.in_channels, cfg.backbone_widths)
        for s in self.encoder.factors:
            if cfg.patch_size % s:
                raise ValueError(f"patch size {cfg.patch_size} not divisible by stage factor {s}")
        self.fusion = nn.ModuleList(
            CrossScaleInjection(d, c) for d, c in zip(cfg.native_widths, cfg.backbone_widths)
        )
        self.decoder = TopDownDecoder(cfg.backbone_widths, cfg.decoder_width, cfg.in_channels, cfg.head_width)

    @property
    def windows(self) -> tuple[int, ...]:
        return tuple(self.cfg.patch_size // s for s in self.encoder.factors)

    def load_relevance(self, relevance: RelevanceNet):
        self.native.load_state_dict(relevance.native.state_dict())
        self.scorer.load_state_dict(relevance.scorer.state_dict())

    def predict_scores(self, images: torch.Tensor) -> torch.Tensor:
        x = to_model_input(images, self.cfg.in_channels)
        return self.scorer(self.native(x).tokens[-1])

    def forward(self, images: torch.Tensor, use_native: bool = True, k: int | None = None) -> Prediction:
        x = to_model_input(images, self.cfg.in_channels)
        semantic = self.encoder(x).features
        if not use_native:
            return Prediction(self.decoder(semantic, x), None, None)

        pyramid = self.native(x)
        # hard selection: no gradient reaches the scorer through the indices
        scores = self.scorer(pyramid.tokens[-1]).detach()
        indices = topk_select(scores, k or self.k)
        fused = []
        for feat, nat, inject, win in zip(semantic, pyramid.features, self.fusion, self.windows):
            regions = gather_semantic(feat, indices, win)
            injected = inject(regions, gather_patches(nat, indices))
            fused.append(scatter_back(feat, injected, indices, win))
        return Prediction(self.decoder(fused, x), scores, indices)


MODULE_NAMES = ("native", "scorer", "encoder", "fusion", "decoder")
