"""Inference helpers, coverage sweeps and prediction file output."""

from __future__ import annotations

import csv
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from PIL import Image

from .data import IRDataset
from .lattice import LatticeSpec
from .metrics import THRESHOLD, MetricAccumulator, binarize
from .relevance import coverage, patch_precision, topk_select

PROB_MAGIC = b"NAPM"
_PROB_HEADER = struct.Struct("<4sIIB")
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


def _image_batches(ds: IRDataset, batch_size: int):
    for i in range(0, len(ds), batch_size):
        chunk = ds.samples[i:i + batch_size]
        yield torch.from_numpy(np.stack([s.image for s in chunk]).astype(np.float32)).unsqueeze(1)


@torch.no_grad()
def compute_scores(net: torch.nn.Module, ds: IRDataset, batch_size: int = 16) -> np.ndarray:
    """Relevance scores ``(n, N)`` from a RelevanceNet or a full NaIRSTD."""
    was_training = net.training
    net.eval()
    score_fn = net.predict_scores if hasattr(net, "predict_scores") else net
    out = [score_fn(x).numpy() for x in _image_batches(ds, batch_size)]
    net.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, 0))


def selections(scores: np.ndarray, k: int) -> np.ndarray:
    return topk_select(torch.from_numpy(np.asarray(scores)), k).numpy()


def coverage_at_k(scores: np.ndarray, ds: IRDataset, lattice: LatticeSpec, k: int) -> float:
    """Mean target-recall coverage over images that contain targets."""
    sel = selections(scores, k)
    vals = [c for c in (coverage(j, s.mask, lattice) for j, s in zip(sel, ds)) if c is not None]
    return float(np.mean(vals)) if vals else float("nan")


def precision_at_k(scores: np.ndarray, ds: IRDataset, lattice: LatticeSpec, k: int) -> float:
    sel = selections(scores, k)
    return float(np.mean([patch_precision(j, s.mask, lattice) for j, s in zip(sel, ds)]))


def coverage_sweep(scores: np.ndarray, ds: IRDataset, lattice: LatticeSpec, ks: Iterable[int]) -> list[dict]:
    rows = []
    for k in ks:
        k = min(int(k), lattice.num_patches)
        rows.append({"k": k, "coverage": coverage_at_k(scores, ds, lattice, k),
                     "patch_precision": precision_at_k(scores, ds, lattice, k)})
    return rows


def write_coverage_csv(path: str | Path, rows: Sequence[dict], dataset: str = "", supervision: str = ""):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "coverage", "patch_precision", "dataset", "supervision"])
        for r in rows:
            w.writerow([r["k"], f"{r['coverage']:.6f}", f"{r['patch_precision']:.6f}", dataset, supervision])


@torch.no_grad()
def predict_probs(model: torch.nn.Module, ds: IRDataset, batch_size: int = 16) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = [torch.sigmoid(model(x).logits)[:, 0].numpy() for x in _image_batches(ds, batch_size)]
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, 0, 0), dtype=np.float32)


def evaluate_model(model: torch.nn.Module, ds: IRDataset, batch_size: int = 16,
                   probs: np.ndarray | None = None, threshold: float = THRESHOLD) -> MetricAccumulator:
    probs = predict_probs(model, ds, batch_size) if probs is None else probs
    acc = MetricAccumulator()
    for p, s in zip(probs, ds):
        acc.update(binarize(p, threshold), s.mask, s.name)
    return acc


def write_prob_map(path: str | Path, prob: np.ndarray):
    prob = np.asarray(prob)
    code = {np.dtype("float32"): 1, np.dtype("float64"): 2}.get(prob.dtype)
    if code is None or prob.ndim != 2:
        raise ValueError("probability maps must be 2-D float32 or float64 arrays")
    h, w = prob.shape
    Path(path).write_bytes(_PROB_HEADER.pack(PROB_MAGIC, h, w, code) + prob.astype(_DTYPES[code]).tobytes())


def read_prob_map(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < _PROB_HEADER.size:
        raise ValueError(f"{path}: file too short")
    magic, h, w, code = _PROB_HEADER.unpack_from(blob)
    if magic != PROB_MAGIC or code not in _DTYPES:
        raise ValueError(f"{path}: not a probability map")
    dtype = _DTYPES[code]
    body = blob[_PROB_HEADER.size:]
    if len(body) != h * w * dtype.itemsize:
        raise ValueError(f"{path}: expected {h * w} values, file holds {len(body) // dtype.itemsize}")
    return np.frombuffer(body, dtype=dtype).reshape(h, w).astype(dtype.newbyteorder("="))


def write_predictions(out_dir: str | Path, ds: IRDataset, probs: np.ndarray):
    out = Path(out_dir)
    (out / "pred_masks").mkdir(parents=True, exist_ok=True)
    (out / "prob_maps").mkdir(parents=True, exist_ok=True)
    for s, p in zip(ds, probs):
        Image.fromarray(binarize(p) * 255, mode="L").save(out / "pred_masks" / f"{s.name}.png")
        write_prob_map(out / "prob_maps" / f"{s.name}.bin", p.astype(np.float32))
