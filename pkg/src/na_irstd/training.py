"""Two-stage optimization: relevance pretraining, then segmentation fine-tuning."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .checkpoint import Checkpoint, CheckpointError, apply_checkpoint, checkpoint_from_model
from .data import IRDataset
from .evaluate import compute_scores, coverage_at_k, evaluate_model
from .losses import seg_loss_with_logits
from .model import ModelConfig, NaIRSTD, RelevanceNet
from .relevance import mask_to_patch_labels, score_loss
from .utils import derive_seed

logger = logging.getLogger(__name__)

LOG_FIELDS = ["epoch", "stage", "lr_native", "lr_scorer", "lr_backbone_fusion", "loss", "val_coverage", "val_iou"]


@dataclass
class TrainConfig:
    batch_size: int = 8
    stage1_epochs: int = 50
    stage2_epochs: int = 100
    lr_stage1: float = 1e-4
    lr_backbone_fusion: float = 1e-4
    lr_native_branch_stage2: float = 1e-6
    sigma: float = 8.0
    k: int = 5
    label_mode: str = "soft"
    seed: int = 0

    def validate(self):
        for name in ("lr_stage1", "lr_backbone_fusion", "lr_native_branch_stage2", "sigma"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.batch_size < 1 or self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ValueError("batch_size must be >= 1 and epoch counts non-negative")
        if self.label_mode not in ("soft", "hard"):
            raise ValueError(f"label_mode must be 'soft' or 'hard', got {self.label_mode!r}")


def make_schedule(base_lr: float, total_epochs: int) -> Callable[[int], float]:
    """Cosine decay from ``base_lr`` at epoch 0 toward 0 at ``total_epochs``."""
    if total_epochs < 1:
        raise ValueError("total_epochs must be >= 1")

    def rate(epoch: int) -> float:
        e = min(max(epoch, 0), total_epochs)
        return base_lr * 0.5 * (1.0 + math.cos(math.pi * e / total_epochs))

    return rate


def params_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def set_deterministic(flag: bool = True):
    if flag:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    model: torch.nn.Module
    history: list[dict] = field(default_factory=list)


class _Log:
    def __init__(self, path: str | Path | None):
        self.rows: list[dict] = []
        self.path = Path(path) if path else None
        if self.path:
            with open(self.path, "w", newline="", encoding="utf-8") as fh:
                csv.DictWriter(fh, LOG_FIELDS).writeheader()

    def add(self, row: dict):
        row = {k: row.get(k, "") for k in LOG_FIELDS}
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", newline="", encoding="utf-8") as fh:
                csv.DictWriter(fh, LOG_FIELDS).writerow(row)


def _tensors(ds: IRDataset) -> tuple[torch.Tensor, torch.Tensor]:
    if len(ds) == 0:
        raise ValueError("cannot train on an empty dataset")
    images = torch.from_numpy(ds.images()).unsqueeze(1)
    masks = torch.from_numpy(ds.masks()).unsqueeze(1).float()
    return images, masks


def patch_label_matrix(ds: IRDataset, model_cfg: ModelConfig, sigma: float, mode: str = "soft") -> torch.Tensor:
    lattice = model_cfg.lattice()
    rows = [mask_to_patch_labels(s.mask, lattice, sigma, mode) for s in ds]
    return torch.from_numpy(np.stack(rows)).float()


def _batches(n: int, batch_size: int, gen: torch.Generator):
    perm = torch.randperm(n, generator=gen)
    for i in range(0, n, batch_size):
        yield perm[i:i + batch_size]


def _snapshot(model_cfg: ModelConfig, train_cfg: TrainConfig) -> dict:
    return {"model": dataclasses.asdict(model_cfg), "train": dataclasses.asdict(train_cfg)}


def stage1_train(
    train: IRDataset,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    val: IRDataset | None = None,
    log_path: str | Path | None = None,
    epochs: int | None = None,
) -> TrainResult:
    """Fit native branch + scorer to patch relevance labels.

    No backbone, fusion or decoder is constructed in this stage.
    """
    cfg.validate()
    epochs = cfg.stage1_epochs if epochs is None else epochs
    torch.manual_seed(derive_seed(cfg.seed, "stage1-init"))
    net = RelevanceNet(model_cfg)
    images, _ = _tensors(train)
    labels = patch_label_matrix(train, model_cfg, cfg.sigma, cfg.label_mode)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr_stage1, betas=(0.9, 0.999), weight_decay=0.0)
    rate = make_schedule(cfg.lr_stage1, max(epochs, 1))
    gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "stage1-shuffle"))
    log = _Log(log_path)
    for epoch in range(epochs):
        lr = rate(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        net.train()
        total, count = 0.0, 0
        for idx in _batches(len(images), cfg.batch_size, gen):
            loss = score_loss(net(images[idx]), labels[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        row = {"epoch": epoch, "stage": 1, "lr_native": lr, "lr_scorer": lr, "loss": total / count}
        if val is not None and len(val):
            row["val_coverage"] = coverage_at_k(compute_scores(net, val), val, model_cfg.lattice(), cfg.k)
        log.add(row)
        logger.info("stage 1 epoch %d loss %.5f", epoch, row["loss"])
    ckpt = checkpoint_from_model(net, _snapshot(model_cfg, cfg), stage=1, epoch=epochs,
                                 schedule={"kind": "cosine", "base_lr": cfg.lr_stage1, "epochs": epochs})
    return TrainResult(ckpt, net, log.rows)


def build_stage2_model(stage1: Checkpoint, model_cfg: ModelConfig, k: int) -> NaIRSTD:
    saved = stage1.config.get("model")
    if saved is not None and saved != dataclasses.asdict(model_cfg):
        raise CheckpointError("stage-1 checkpoint was trained with a different model config")
    model = NaIRSTD(model_cfg, k)
    apply_checkpoint(model, stage1, modules=("native", "scorer"))
    for p in model.scorer.parameters():
        p.requires_grad_(False)
    return model


def stage2_optimizer(model: NaIRSTD, cfg: TrainConfig) -> torch.optim.Adam:
    backbone_fusion = [*model.encoder.parameters(), *model.fusion.parameters(), *model.decoder.parameters()]
    return torch.optim.Adam(
        [
            {"params": list(model.native.parameters()), "lr": cfg.lr_native_branch_stage2, "name": "native"},
            {"params": backbone_fusion, "lr": cfg.lr_backbone_fusion, "name": "backbone_fusion"},
        ],
        betas=(0.9, 0.999),
        weight_decay=0.0,
    )


def stage2_train(
    train: IRDataset,
    stage1: Checkpoint,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    val: IRDataset | None = None,
    log_path: str | Path | None = None,
    epochs: int | None = None,
    on_step: Callable[[NaIRSTD], None] | None = None,
) -> TrainResult:
    """Segmentation fine-tuning with the scorer frozen and a restarted cosine schedule."""
    cfg.validate()
    if stage1.stage != 1 or "scorer" not in stage1.params or "native" not in stage1.params:
        raise CheckpointError("stage 2 needs a stage-1 checkpoint holding native and scorer parameters")
    epochs = cfg.stage2_epochs if epochs is None else epochs
    torch.manual_seed(derive_seed(cfg.seed, "stage2-init"))
    model = build_stage2_model(stage1, model_cfg, cfg.k)
    images, masks = _tensors(train)
    opt = stage2_optimizer(model, cfg)
    rates = {g["name"]: make_schedule(g["lr"], max(epochs, 1)) for g in opt.param_groups}
    gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "stage2-shuffle"))
    log = _Log(log_path)
    for epoch in range(epochs):
        for g in opt.param_groups:
            g["lr"] = rates[g["name"]](epoch)
        model.train()
        total, count = 0.0, 0
        for idx in _batches(len(images), cfg.batch_size, gen):
            loss = seg_loss_with_logits(model(images[idx]).logits, masks[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            if on_step is not None:
                on_step(model)
            total += loss.item() * len(idx)
            count += len(idx)
        lrs = {g["name"]: g["lr"] for g in opt.param_groups}
        row = {"epoch": epoch, "stage": 2, "lr_native": lrs["native"], "lr_scorer": 0.0,
               "lr_backbone_fusion": lrs["backbone_fusion"], "loss": total / count}
        if val is not None and len(val):
            row["val_coverage"] = coverage_at_k(compute_scores(model, val), val, model_cfg.lattice(), cfg.k)
            row["val_iou"] = evaluate_model(model, val).report().iou
        log.add(row)
        logger.info("stage 2 epoch %d loss %.5f", epoch, row["loss"])
    ckpt = checkpoint_from_model(
        model, _snapshot(model_cfg, cfg), stage=2, epoch=epochs,
        schedule={"kind": "cosine", "restarted": True, "epochs": epochs,
                  "base_lr": {"native": cfg.lr_native_branch_stage2, "backbone_fusion": cfg.lr_backbone_fusion}},
    )
    return TrainResult(ckpt, model, log.rows)


def model_from_checkpoint(ckpt: Checkpoint, model_cfg: ModelConfig | None = None, k: int | None = None):
    """Rebuild a :class:`RelevanceNet` (stage 1) or :class:`NaIRSTD` (stage 2) from a checkpoint."""
    if model_cfg is None:
        if "model" not in ckpt.config:
            raise CheckpointError("checkpoint carries no model config")
        model_cfg = ModelConfig(**ckpt.config["model"])
    if k is None:
        k = ckpt.config.get("train", {}).get("k", 5)
    if {"encoder", "fusion", "decoder"} <= set(ckpt.params):
        model = NaIRSTD(model_cfg, k)
    else:
        model = RelevanceNet(model_cfg)
    apply_checkpoint(model, ckpt)
    model.eval()
    return model
