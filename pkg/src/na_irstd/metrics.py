"""Pixel IoU and object-level Pd / Fa with centroid-based matching."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import ndimage

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)
THRESHOLD = 0.5
CENTROID_RADIUS = 3.0


def binarize(prob: np.ndarray, threshold: float = THRESHOLD) -> np.ndarray:
    return (np.asarray(prob) > threshold).astype(np.uint8)


def label_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    return ndimage.label(np.asarray(mask) > 0, structure=EIGHT_CONNECTED)


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred) > 0
    gt = np.asarray(gt) > 0
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    inter = np.count_nonzero(pred & gt)
    union = np.count_nonzero(pred) + np.count_nonzero(gt) - inter
    return 1.0 if union == 0 else inter / union


@dataclass
class MatchResult:
    tp: int
    fn: int
    fp: int
    fp_pixels: int = 0
    matches: list[tuple[int, int]] = field(default_factory=list)


def _components(mask):
    labels, n = label_components(mask)
    if n == 0:
        return labels, [], np.zeros((0, 2))
    flat = labels.ravel()
    rows, cols = np.indices(labels.shape)
    sizes = np.bincount(flat, minlength=n + 1)[1:]
    cents = np.stack([np.bincount(flat, rows.ravel(), n + 1)[1:], np.bincount(flat, cols.ravel(), n + 1)[1:]], 1)
    return labels, sizes.tolist(), cents / sizes[:, None]


def match_objects(pred: np.ndarray, gt: np.ndarray, radius: float = CENTROID_RADIUS) -> MatchResult:
    """Greedy one-to-one matching of predicted to ground-truth components.

    A pair is eligible when the components share a pixel or their centroids are
    at most ``radius`` apart. Eligible pairs are taken in order of centroid
    distance (ties by gt label, then pred label).
    """
    pred = np.asarray(pred) > 0
    gt = np.asarray(gt) > 0
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    gl, _, gc = _components(gt)
    pl, psizes, pc = _components(pred)
    ng, npred = len(gc), len(pc)

    candidates = []
    if ng and npred:
        # squared distances rounded so that mathematically equal ones tie exactly
        dist2 = np.round(((gc[:, None, :] - pc[None, :, :]) ** 2).sum(-1), 9)
        both = (gl > 0) & (pl > 0)
        overlap = np.zeros((ng, npred), dtype=bool)
        overlap[gl[both] - 1, pl[both] - 1] = True
        for g, p in zip(*np.nonzero(overlap | (dist2 <= radius * radius))):
            candidates.append((dist2[g, p], g, p))
    candidates.sort()

    used_g, used_p, matches = set(), set(), []
    for _, g, p in candidates:
        if g in used_g or p in used_p:
            continue
        used_g.add(g)
        used_p.add(p)
        matches.append((int(g), int(p)))
    unmatched = [p for p in range(npred) if p not in used_p]
    return MatchResult(
        tp=len(matches),
        fn=ng - len(matches),
        fp=len(unmatched),
        fp_pixels=int(sum(psizes[p] for p in unmatched)),
        matches=matches,
    )


def pd(tp: int, fn: int) -> float:
    total = tp + fn
    return 0.0 if total == 0 else tp / total


def fa(fp_pixels: int, total_pixels: int) -> float:
    """False-alarm pixels per evaluated pixel (multiply by 1e6 for the usual unit)."""
    if total_pixels <= 0:
        raise ValueError("total_pixels must be positive")
    return fp_pixels / total_pixels


@dataclass
class DetectionReport:
    iou: float
    pd: float
    fa: float
    tp: int
    fn: int
    fp: int
    fp_pixels: int
    total_pixels: int
    inter_pixels: int
    union_pixels: int
    num_images: int

    @property
    def fa_e6(self) -> float:
        return self.fa * 1e6


class MetricAccumulator:
    """Pools pixel and object counts over a test set (ratio of sums)."""

    def __init__(self):
        self.rows: list[dict] = []
        self.inter = self.union = 0
        self.tp = self.fn = self.fp = self.fp_pixels = 0
        self.total_pixels = 0

    def update(self, pred: np.ndarray, gt: np.ndarray, name: str = "") -> dict:
        pred = np.asarray(pred) > 0
        gt = np.asarray(gt) > 0
        inter = int(np.count_nonzero(pred & gt))
        union = int(np.count_nonzero(pred | gt))
        m = match_objects(pred, gt)
        self.inter += inter
        self.union += union
        self.tp += m.tp
        self.fn += m.fn
        self.fp += m.fp
        self.fp_pixels += m.fp_pixels
        self.total_pixels += pred.size
        row = {
            "name": name,
            "iou": 1.0 if union == 0 else inter / union,
            "tp": m.tp,
            "fn": m.fn,
            "fp": m.fp,
            "fp_pixels": m.fp_pixels,
        }
        self.rows.append(row)
        return row

    def report(self) -> DetectionReport:
        return DetectionReport(
            iou=1.0 if self.union == 0 else self.inter / self.union,
            pd=pd(self.tp, self.fn),
            fa=fa(self.fp_pixels, self.total_pixels) if self.total_pixels else 0.0,
            tp=self.tp,
            fn=self.fn,
            fp=self.fp,
            fp_pixels=self.fp_pixels,
            total_pixels=self.total_pixels,
            inter_pixels=self.inter,
            union_pixels=self.union,
            num_images=len(self.rows),
        )


def evaluate_masks(preds: Iterable[np.ndarray], gts: Iterable[np.ndarray], names: Iterable[str] | None = None):
    acc = MetricAccumulator()
    names = names if names is not None else (str(i) for i in range(10**9))
    for p, g, n in zip(preds, gts, names):
        acc.update(p, g, n)
    return acc


def write_report_csv(path: str | Path, acc: MetricAccumulator):
    rep = acc.report()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "iou", "tp", "fn", "fp", "fp_pixels", "pd", "fa_e6"])
        for r in acc.rows:
            w.writerow([r["name"], f"{r['iou']:.6f}", r["tp"], r["fn"], r["fp"], r["fp_pixels"], "", ""])
        w.writerow(["__summary__", f"{rep.iou:.6f}", rep.tp, rep.fn, rep.fp, rep.fp_pixels,
                    f"{rep.pd:.6f}", f"{rep.fa_e6:.4f}"])
