"""Rendering of coverage curves, size CDFs and patch score heatmaps from emitted CSVs."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path} has no data rows")
    return rows


def score_grid(rows: list[dict], name: str | None = None) -> np.ndarray:
    """Arrange ``(name, j, u, v, score)`` rows of one image on its (H/P) x (W/P) grid."""
    name = name or rows[0]["name"]
    mine = [r for r in rows if r["name"] == name]
    if not mine:
        raise ValueError(f"no scores for image {name!r}")
    gh = max(int(r["u"]) for r in mine) + 1
    gw = max(int(r["v"]) for r in mine) + 1
    grid = np.full((gh, gw), np.nan)
    for r in mine:
        grid[int(r["u"]), int(r["v"])] = float(r["score"])
    return grid


def plot_csv(csv_path: str | Path, kind: str, out: str | Path | None = None, name: str | None = None) -> Path:
    rows = _rows(csv_path)
    out = Path(out) if out else Path(csv_path).with_suffix(".png")
    if out.suffix != ".png":
        out.mkdir(parents=True, exist_ok=True)
        out = out / (Path(csv_path).stem + f"_{kind}.png")
    fig, ax = plt.subplots(figsize=(5, 4))
    if kind == "coverage":
        curves = defaultdict(list)
        for r in rows:
            curves[r.get("supervision") or "scorer"].append((int(r["k"]), float(r["coverage"])))
        for label, pts in sorted(curves.items()):
            pts.sort()
            ax.plot([k for k, _ in pts], [c for _, c in pts], marker="o", label=label)
        ax.set_xlabel("K")
        ax.set_ylabel("Top-K coverage")
        ax.set_ylim(0, 1.02)
        ax.legend()
    elif kind == "cdf":
        curves = defaultdict(list)
        for r in rows:
            curves[r.get("dataset") or "dataset"].append((int(r["area"]), float(r["cdf"])))
        for label, pts in sorted(curves.items()):
            pts.sort()
            ax.step([a for a, _ in pts], [c for _, c in pts], where="post", label=label)
        ax.set_xlabel("target area (px)")
        ax.set_ylabel("cumulative fraction")
        ax.legend()
    elif kind == "scores":
        grid = score_grid(rows, name)
        im = ax.imshow(grid, vmin=0, vmax=1, cmap="inferno")
        fig.colorbar(im, ax=ax)
        ax.set_title(name or rows[0]["name"])
    else:
        plt.close(fig)
        raise ValueError(f"unknown plot kind {kind!r}")
    fig.tight_layout()
    fig.savefig(out, dpi=100)
    plt.close(fig)
    return out
