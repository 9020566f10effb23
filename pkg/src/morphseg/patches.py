"""Morphology-aware patch features and window partition machinery.

A patch feature is the weighted sum of image samples taken at the patch's
lattice positions displaced by a deformation field, so patches follow the
warped geometry instead of a rigid rectangle. The dense equivalent (warp
the whole map, then pool or window it) is what the network uses; the
per-patch kernel is kept as the verbatim reference and must agree with the
dense pipeline to machine precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffeo import DeformationField, warp_coords
from .tensor import ShapeError, as_array, grid_sample

__all__ = [
    "PatchGrid",
    "extract_patch_features",
    "warp_features",
    "window_partition",
    "window_merge",
    "cyclic_shift",
]


@dataclass
class PatchGrid:
    """Tiling of an image into non-overlapping patches.

    ``centers`` are the (row, col) centers of each patch in raster order;
    ``offsets`` is the in-patch lattice relative to the center (covers the
    patch exactly once); ``weights`` is one learnable weight per lattice
    position, initialized uniform so an identity deformation reduces the
    patch feature to plain average pooling.
    """

    patch: tuple[int, int]
    centers: np.ndarray
    offsets: np.ndarray
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.weights is None:
            self.weights = np.full(len(self.offsets), 1.0 / len(self.offsets))
        self.weights = as_array(self.weights)
        if self.weights.shape != (len(self.offsets),):
            raise ShapeError("one weight per lattice offset required")

    @classmethod
    def for_image(cls, h: int, w: int, patch: tuple[int, int]) -> "PatchGrid":
        ph, pw = patch
        if h % ph or w % pw:
            raise ShapeError(f"{h}x{w} image not divisible by {ph}x{pw} patches")
        half_r = (ph - 1) / 2.0
        half_c = (pw - 1) / 2.0
        centers = np.array([
            (br * ph + half_r, bc * pw + half_c)
            for br in range(h // ph) for bc in range(w // pw)
        ])
        offsets = np.array([
            (dr - half_r, dc - half_c)
            for dr in range(ph) for dc in range(pw)
        ])
        return cls((ph, pw), centers, offsets)


def extract_patch_features(x, phi: DeformationField, grid: PatchGrid) -> np.ndarray:
    """Per-patch weighted sums of displaced samples, shape [N_patch, C].

    Each sample position is ``center + lattice_offset`` shifted by the
    deformation offsets at that position; samples are weighted by the grid's
    learnable weights and summed. Rows follow the raster order of centers.
    """
    x = as_array(x)
    if x.ndim != 3:
        raise ShapeError(f"expected [C,H,W] input, got {x.shape}")
    if phi.spatial_shape != x.shape[1:]:
        raise ShapeError(f"field {phi.spatial_shape} does not match "
                         f"image {x.shape[1:]}")
    positions = grid.centers[:, None, :] + grid.offsets[None, :, :]
    disp = grid_sample(phi.offsets, positions)     # [2, N, R]
    coords = positions + np.moveaxis(disp, 0, -1)
    vals = grid_sample(x, coords)                  # [C, N, R]
    return np.einsum("cnr,r->nc", vals, grid.weights)


def warp_features(x, phi: DeformationField) -> np.ndarray:
    """Dense warp: out(p) = x sampled at p + offsets(p), same shape as x."""
    x = as_array(x)
    if x.ndim != 3:
        raise ShapeError(f"expected [C,H,W] input, got {x.shape}")
    if phi.spatial_shape != x.shape[1:]:
        raise ShapeError(f"field {phi.spatial_shape} does not match "
                         f"image {x.shape[1:]}")
    return grid_sample(x, warp_coords(phi.offsets))


def window_partition(x, win: tuple[int, int]) -> np.ndarray:
    """Cut [C,H,W] into non-overlapping windows, shape [N_win, wh*ww, C]."""
    x = as_array(x)
    c, h, w = x.shape
    wh, ww = win
    if h % wh or w % ww:
        raise ShapeError(f"{h}x{w} map not divisible by {wh}x{ww} windows")
    t = x.reshape(c, h // wh, wh, w // ww, ww)
    return t.transpose(1, 3, 2, 4, 0).reshape(-1, wh * ww, c)


def window_merge(wins, shape: tuple[int, int], win: tuple[int, int]) -> np.ndarray:
    """Exact inverse of :func:`window_partition`."""
    wins = as_array(wins)
    h, w = shape
    wh, ww = win
    n, l, c = wins.shape
    if l != wh * ww or n != (h // wh) * (w // ww):
        raise ShapeError(f"window block {wins.shape} does not tile {h}x{w}")
    t = wins.reshape(h // wh, w // ww, wh, ww, c)
    return t.transpose(4, 0, 2, 1, 3).reshape(c, h, w)


def cyclic_shift(x, shift: tuple[int, int]) -> np.ndarray:
    """Toroidal roll of the spatial axes; inverted by the negated shift."""
    x = as_array(x)
    return np.roll(x, shift, axis=(1, 2))
