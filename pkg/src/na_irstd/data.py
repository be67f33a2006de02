"""Synthetic infrared scenes, directory datasets and benchmark construction."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .metrics import EIGHT_CONNECTED

logger = logging.getLogger(__name__)

BACKGROUNDS = ("flat", "gradient", "cloud-noise")
SPLITS = ("train", "val", "test")


class DataError(Exception):
    """Unreadable, missing or inconsistent dataset content."""


@dataclass
class Target:
    center: tuple[float, float]
    area: int


@dataclass
class SceneSample:
    name: str
    image: np.ndarray  # (H, W) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    targets: list[Target] = field(default_factory=list)


@dataclass
class IRDataset:
    samples: list[SceneSample]
    splits: dict[str, list[str]] = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.samples]

    def split(self, name: str) -> "IRDataset":
        if name not in self.splits:
            raise DataError(f"dataset has no {name!r} split")
        keep = set(self.splits[name])
        return IRDataset([s for s in self.samples if s.name in keep], {name: list(self.splits[name])})

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples]).astype(np.float32)

    def masks(self) -> np.ndarray:
        return np.stack([s.mask for s in self.samples]).astype(np.uint8)


@dataclass
class SynthConfig:
    count: int = 500
    test_count: int = 100
    val_count: int = 0
    image_size: int = 256
    target_count_range: tuple[int, int] = (1, 3)
    target_area_range: tuple[int, int] = (4, 16)
    target_peak_contrast: tuple[float, float] = (0.25, 0.5)
    background: str = "mixed"
    noise_std: float = 0.02
    seed: int = 0

    def validate(self):
        lo, hi = self.target_count_range
        if not 0 <= lo <= hi:
            raise ValueError(f"bad target_count_range {self.target_count_range}")
        lo, hi = self.target_area_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad target_area_range {self.target_area_range}")
        lo, hi = self.target_peak_contrast
        if not 0 < lo <= hi:
            raise ValueError(f"target contrast must be positive, got {self.target_peak_contrast}")
        if self.background not in (*BACKGROUNDS, "mixed"):
            raise ValueError(f"unknown background {self.background!r}")
        if self.noise_std < 0 or self.count < 0 or self.test_count < 0 or self.val_count < 0:
            raise ValueError("counts and noise_std must be non-negative")


def _background(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    base = rng.uniform(0.15, 0.45)
    if kind == "flat":
        return np.full((size, size), base)
    if kind == "gradient":
        theta = rng.uniform(0, 2 * np.pi)
        rows, cols = np.mgrid[0:size, 0:size] / size
        ramp = np.cos(theta) * rows + np.sin(theta) * cols
        return base + rng.uniform(0.05, 0.2) * (ramp - ramp.mean())
    if kind == "cloud-noise":
        clouds = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=rng.uniform(6, 16))
        clouds /= clouds.std() + 1e-12
        return base + rng.uniform(0.03, 0.08) * clouds
    raise ValueError(f"unknown background {kind!r}")


def _blob(size: int, area: int, rng: np.random.Generator, taken: np.ndarray):
    """Anisotropic Gaussian whose top-``area`` pixels form one 8-connected component."""
    for _ in range(100):
        r0, c0 = rng.uniform(4, size - 5, size=2)
        sr = np.sqrt(area / np.pi) * rng.uniform(0.6, 1.0)
        sc = np.sqrt(area / np.pi) * rng.uniform(0.6, 1.0)
        theta = rng.uniform(0, np.pi)
        half = int(np.ceil(4 * max(sr, sc))) + 2
        rlo, rhi = max(int(r0) - half, 0), min(int(r0) + half + 1, size)
        clo, chi = max(int(c0) - half, 0), min(int(c0) + half + 1, size)
        rr, cc = np.mgrid[rlo:rhi, clo:chi]
        dr, dc = rr - r0, cc - c0
        a = np.cos(theta) * dr + np.sin(theta) * dc
        b = -np.sin(theta) * dr + np.cos(theta) * dc
        g = np.exp(-0.5 * ((a / sr) ** 2 + (b / sc) ** 2))
        order = np.argsort(-g, axis=None, kind="stable")[:area]
        local = np.zeros(g.shape, dtype=bool)
        local.flat[order] = True
        _, ncomp = ndimage.label(local, structure=EIGHT_CONNECTED)
        if ncomp != 1:
            continue
        # keep a one-pixel gap to other targets so components stay separate
        grown = ndimage.binary_dilation(local, structure=EIGHT_CONNECTED, iterations=2)
        if (grown & taken[rlo:rhi, clo:chi]).any():
            continue
        field_ = np.zeros((size, size))
        field_[rlo:rhi, clo:chi] = g
        mask = np.zeros((size, size), dtype=bool)
        mask[rlo:rhi, clo:chi] = local
        return field_, mask, (float(r0), float(c0))
    raise ValueError(f"could not place a {area}-pixel target")


def synth_scene(cfg: SynthConfig, rng: np.random.Generator, name: str) -> SceneSample:
    size = cfg.image_size
    kind = rng.choice(BACKGROUNDS) if cfg.background == "mixed" else cfg.background
    image = _background(str(kind), size, rng)
    mask = np.zeros((size, size), dtype=bool)
    targets = []
    n = int(rng.integers(cfg.target_count_range[0], cfg.target_count_range[1] + 1))
    for _ in range(n):
        area = int(rng.integers(cfg.target_area_range[0], cfg.target_area_range[1] + 1))
        g, m, center = _blob(size, area, rng, mask)
        image += rng.uniform(*cfg.target_peak_contrast) * g
        mask |= m
        targets.append(Target(center, area))
    image += cfg.noise_std * rng.standard_normal((size, size))
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return SceneSample(name, image, mask.astype(np.uint8), targets)


def synth_generate(cfg: SynthConfig) -> IRDataset:
    """Seeded scene set; the first ``count`` samples form the train split."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    samples, splits = [], {}
    for split, count in (("train", cfg.count), ("val", cfg.val_count), ("test", cfg.test_count)):
        names = []
        for i in range(count):
            name = f"{split}_{i:05d}"
            samples.append(synth_scene(cfg, rng, name))
            names.append(name)
        if count:
            splits[split] = names
    return IRDataset(samples, splits)


def write_dataset(ds: IRDataset, root: str | Path):
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in ds:
        Image.fromarray(np.round(s.image * 255).astype(np.uint8), mode="L").save(root / "images" / f"{s.name}.png")
        Image.fromarray((s.mask > 0).astype(np.uint8) * 255, mode="L").save(root / "masks" / f"{s.name}.png")
    if ds.splits:
        (root / "splits").mkdir(exist_ok=True)
        for split, names in ds.splits.items():
            (root / "splits" / f"{split}.txt").write_text("".join(f"{n}.png\n" for n in names))


def _read_gray(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def load_dataset(root: str | Path) -> IRDataset:
    """Read ``root/{images,masks}/<name>.png`` pairs plus optional ``splits/*.txt``."""
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    imgs = {p.stem: p for p in sorted(img_dir.glob("*.png"))} if img_dir.is_dir() else {}
    masks = {p.stem: p for p in sorted(mask_dir.glob("*.png"))} if mask_dir.is_dir() else {}
    if not imgs and not masks:
        logger.warning("no images found under %s", root)
        return IRDataset([])
    unpaired = sorted(set(imgs) ^ set(masks))
    if unpaired:
        raise DataError(f"images and masks do not pair up: {', '.join(unpaired)}")
    samples = []
    for name in sorted(imgs):
        image = _read_gray(imgs[name]).astype(np.float32) / 255.0
        mask = (_read_gray(masks[name]) > 0).astype(np.uint8)
        if image.shape != mask.shape:
            raise DataError(f"{name}: image {image.shape} and mask {mask.shape} differ in size")
        samples.append(SceneSample(name, image, mask, describe_targets(mask)))
    splits = {}
    for split in SPLITS:
        f = root / "splits" / f"{split}.txt"
        if f.exists():
            names = [Path(line.strip()).stem for line in f.read_text().splitlines() if line.strip()]
            missing = [n for n in names if n not in imgs]
            if missing:
                raise DataError(f"split {split} lists unknown files: {', '.join(missing)}")
            splits[split] = names
    return IRDataset(samples, splits)


def component_areas(mask: np.ndarray) -> list[int]:
    labels, n = ndimage.label(np.asarray(mask) > 0, structure=EIGHT_CONNECTED)
    if n == 0:
        return []
    return [int(a) for a in np.bincount(labels.ravel())[1:]]


def describe_targets(mask: np.ndarray) -> list[Target]:
    labels, n = ndimage.label(np.asarray(mask) > 0, structure=EIGHT_CONNECTED)
    if n == 0:
        return []
    idx = range(1, n + 1)
    cents = ndimage.center_of_mass(np.ones_like(labels), labels, idx)
    areas = np.bincount(labels.ravel())[1:]
    return [Target((float(r), float(c)), int(a)) for (r, c), a in zip(cents, areas)]


def resize_sample(sample: SceneSample, size: int) -> SceneSample:
    if sample.image.shape == (size, size):
        return sample
    img = Image.fromarray(sample.image.astype(np.float32), mode="F").resize((size, size), Image.BILINEAR)
    msk = Image.fromarray((sample.mask > 0).astype(np.uint8) * 255, mode="L").resize((size, size), Image.NEAREST)
    mask = (np.asarray(msk) > 0).astype(np.uint8)
    return SceneSample(sample.name, np.clip(np.asarray(img), 0, 1).astype(np.float32), mask, describe_targets(mask))


@dataclass
class HardBenchSpec:
    size_threshold: int = 20
    resize_to: tuple[int, int] = (256, 256)

    def __post_init__(self):
        if self.size_threshold <= 0:
            raise ValueError("size_threshold must be positive")


@dataclass
class HardBenchmark:
    dataset: IRDataset
    manifest: list[dict]
    source_counts: dict[str, int]

    @property
    def total(self) -> int:
        return sum(self.source_counts.values())


def build_hard_benchmark(sources: dict[str, IRDataset], spec: HardBenchSpec | None = None) -> HardBenchmark:
    """Admit test-split images whose every target is strictly smaller than the threshold.

    Areas are measured after resizing, on the same grid used for evaluation.
    """
    spec = spec or HardBenchSpec()
    h, w = spec.resize_to
    if h != w:
        raise ValueError("only square resize targets are supported")
    samples, manifest, counts = [], [], {}
    for source, ds in sources.items():
        if "test" not in ds.splits:
            raise DataError(f"source {source!r} has no test partition")
        counts[source] = 0
        for s in ds.split("test"):
            r = resize_sample(s, h)
            areas = component_areas(r.mask)
            if not areas or max(areas) >= spec.size_threshold:
                continue
            name = f"{source}__{s.name}"
            samples.append(SceneSample(name, r.image, r.mask, r.targets))
            manifest.append({"source": source, "filename": f"{name}.png", "num_targets": len(areas),
                             "max_area": max(areas)})
            counts[source] += 1
    out = IRDataset(samples, {"test": [s.name for s in samples]})
    return HardBenchmark(out, manifest, counts)


def write_manifest(path: str | Path, manifest: Sequence[dict]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["source", "filename", "num_targets", "max_area"])
        w.writeheader()
        w.writerows(manifest)


@dataclass
class SizeStatistics:
    mean: float
    median: float
    cdf: list[tuple[int, float]]
    multi_target_images: int
    targets_per_image: list[int]
    areas: list[int]


def size_statistics(ds: IRDataset) -> SizeStatistics:
    areas, per_image = [], []
    for s in ds:
        a = component_areas(s.mask)
        areas.extend(a)
        per_image.append(len(a))
    if not areas:
        raise DataError("dataset contains no targets")
    arr = np.asarray(areas)
    values, counts = np.unique(arr, return_counts=True)
    cdf = [(int(v), float(c)) for v, c in zip(values, np.cumsum(counts) / arr.size)]
    return SizeStatistics(
        mean=float(arr.mean()),
        median=float(np.median(arr)),
        cdf=cdf,
        multi_target_images=sum(n > 1 for n in per_image),
        targets_per_image=per_image,
        areas=areas,
    )


def write_cdf(path: str | Path, stats: SizeStatistics, dataset: str = ""):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset", "area", "cdf"])
        for a, c in stats.cdf:
            w.writerow([dataset, a, f"{c:.6f}"])


def degrade_image(image: np.ndarray, factor: int) -> np.ndarray:
    """Average-pool by ``factor`` and replicate back to the original grid."""
    h, w = image.shape
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"factor {factor} does not divide {h}x{w}")
    if factor == 1:
        return image.copy()
    pooled = image.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))
    return np.repeat(np.repeat(pooled, factor, axis=0), factor, axis=1).astype(image.dtype)


def downsample_ablation_prep(ds: IRDataset, factor: int = 2) -> IRDataset:
    samples = [SceneSample(s.name, degrade_image(s.image, factor), s.mask, s.targets) for s in ds]
    return IRDataset(samples, {k: list(v) for k, v in ds.splits.items()})
