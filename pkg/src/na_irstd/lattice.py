"""Non-overlapping patch lattice geometry.

Patches are ordered row-major over the lattice: patch ``j`` sits at row
``u = j // (W/P)`` and column ``v = j - u * (W/P)``. Every module in the
package uses this single ordering.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch


class LatticeError(ValueError):
    """Raised when a tensor or index does not fit the patch lattice."""


@dataclass(frozen=True)
class LatticeSpec:
    height: int
    width: int
    patch_size: int

    def __post_init__(self):
        if self.patch_size < 1:
            raise LatticeError(f"patch_size must be >= 1, got {self.patch_size}")
        if self.height % self.patch_size or self.width % self.patch_size:
            raise LatticeError(
                f"image {self.height}x{self.width} is not divisible by patch size {self.patch_size}"
            )

    @property
    def grid_h(self) -> int:
        return self.height // self.patch_size

    @property
    def grid_w(self) -> int:
        return self.width // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_h * self.grid_w


@dataclass(frozen=True)
class StageWindow:
    """Footprint of lattice patch ``index`` on a feature map downsampled by ``factor``."""

    index: int
    factor: int
    size: int
    origin: tuple[int, int]

    def pixel_footprint(self) -> tuple[int, int, int, int]:
        """(row0, col0, row1, col1) of the window rescaled to native pixels."""
        r, c = self.origin
        s = self.factor
        return r * s, c * s, (r + self.size) * s, (c + self.size) * s


def index_to_coords(j: int, spec: LatticeSpec) -> tuple[int, int]:
    if not 0 <= j < spec.num_patches:
        raise LatticeError(f"patch index {j} outside [0, {spec.num_patches})")
    u = j // spec.grid_w
    return u, j - u * spec.grid_w


def coords_to_index(u: int, v: int, spec: LatticeSpec) -> int:
    if not (0 <= u < spec.grid_h and 0 <= v < spec.grid_w):
        raise LatticeError(f"lattice coords ({u}, {v}) outside {spec.grid_h}x{spec.grid_w} grid")
    return u * spec.grid_w + v


def patch_footprint(j: int, spec: LatticeSpec) -> tuple[int, int, int, int]:
    u, v = index_to_coords(j, spec)
    p = spec.patch_size
    return u * p, v * p, (u + 1) * p, (v + 1) * p


def window_at_stage(j: int, factor: int, spec: LatticeSpec) -> StageWindow:
    if factor < 1 or spec.patch_size % factor:
        raise LatticeError(
            f"downsampling factor {factor} does not divide patch size {spec.patch_size}"
        )
    u, v = index_to_coords(j, spec)
    size = spec.patch_size // factor
    return StageWindow(index=j, factor=factor, size=size, origin=(u * size, v * size))


def _to_windows(x: torch.Tensor, size: int) -> torch.Tensor:
    # (..., C, H, W) -> (..., N, C, size, size), row-major over windows
    *lead, c, h, w = x.shape
    gh, gw = h // size, w // size
    x = x.reshape(*lead, c, gh, size, gw, size)
    nd = len(lead)
    perm = list(range(nd)) + [nd + 1, nd + 3, nd, nd + 2, nd + 4]
    return x.permute(perm).reshape(*lead, gh * gw, c, size, size)


def _from_windows(x: torch.Tensor, gh: int, gw: int) -> torch.Tensor:
    *lead, n, c, size, _ = x.shape
    x = x.reshape(*lead, gh, gw, c, size, size)
    nd = len(lead)
    perm = list(range(nd)) + [nd + 2, nd, nd + 3, nd + 1, nd + 4]
    return x.permute(perm).reshape(*lead, c, gh * size, gw * size)


def partition(image: torch.Tensor, spec: LatticeSpec) -> torch.Tensor:
    """Split a ``(C, H, W)`` or ``(B, C, H, W)`` image into ``(…, N, C, P, P)`` patches."""
    if image.dim() not in (3, 4):
        raise LatticeError(f"expected a 3D or 4D image tensor, got shape {tuple(image.shape)}")
    h, w = image.shape[-2:]
    if (h, w) != (spec.height, spec.width):
        raise LatticeError(f"image is {h}x{w} but lattice expects {spec.height}x{spec.width}")
    return _to_windows(image, spec.patch_size)


def reassemble(patches: torch.Tensor, spec: LatticeSpec) -> torch.Tensor:
    """Inverse of :func:`partition`."""
    if patches.dim() not in (4, 5):
        raise LatticeError(f"expected (…, N, C, P, P) patches, got shape {tuple(patches.shape)}")
    n, _, ph, pw = patches.shape[-4:]
    if n != spec.num_patches:
        raise LatticeError(f"got {n} patches, lattice has {spec.num_patches}")
    if ph != spec.patch_size or pw != spec.patch_size:
        raise LatticeError(f"patches are {ph}x{pw}, lattice patch size is {spec.patch_size}")
    return _from_windows(patches, spec.grid_h, spec.grid_w)


def partition_semantic(feature: torch.Tensor, window: int, num_patches: int | None = None) -> torch.Tensor:
    """Cut a stage feature map ``(…, C, H_l, W_l)`` into ``(…, N, C, P', P')`` windows.

    Window ``n`` covers lattice patch ``n`` when ``window == P / s_l``.
    """
    h, w = feature.shape[-2:]
    if window < 1 or h % window or w % window:
        raise LatticeError(f"feature map {h}x{w} is not divisible by window size {window}")
    n = (h // window) * (w // window)
    if num_patches is not None and n != num_patches:
        raise LatticeError(f"feature map yields {n} windows, lattice has {num_patches}")
    return _to_windows(feature, window)


def merge_semantic(windows: torch.Tensor, grid_h: int, grid_w: int) -> torch.Tensor:
    """Inverse of :func:`partition_semantic`."""
    n = windows.shape[-4]
    if n != grid_h * grid_w:
        raise LatticeError(f"got {n} windows for a {grid_h}x{grid_w} grid")
    return _from_windows(windows, grid_h, grid_w)
