"""Segmentation metrics: Dice, mIoU, and topology-aware clDice.

clDice compares each mask against the other's morphological skeleton, so a
prediction only scores well if it preserves centerline connectivity.
Skeletons come from Zhang-Suen two-subiteration thinning, which is
deterministic and exactly reproducible in tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError

__all__ = [
    "SegMask",
    "Skeleton",
    "dice",
    "iou",
    "miou",
    "mean_dice",
    "skeletonize",
    "cl_dice",
    "mean_cl_dice",
]


@dataclass(frozen=True)
class SegMask:
    """Integer label raster with a declared class count."""

    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.ndim != 2:
            raise ShapeError(f"label raster must be 2-D, got {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            if not np.all(arr == np.round(arr)):
                raise ValueError("labels must be integers")
            arr = arr.astype(np.int64)
        if arr.min() < 0 or arr.max() >= self.num_classes:
            raise ValueError(
                f"labels outside [0, {self.num_classes}): "
                f"range {arr.min()}..{arr.max()}")
        object.__setattr__(self, "labels", arr)

    def binary(self, cls: int) -> np.ndarray:
        if not 0 <= cls < self.num_classes:
            raise ValueError(f"class {cls} out of range")
        return self.labels == cls


@dataclass(frozen=True)
class Skeleton:
    """Thinned binary mask: subset of the input, no 2x2 foreground square."""

    mask: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.mask, dtype=bool)
        if arr.ndim != 2:
            raise ShapeError(f"skeleton must be 2-D, got {arr.shape}")
        if (arr[:-1, :-1] & arr[1:, :-1] & arr[:-1, 1:] & arr[1:, 1:]).any():
            raise ValueError("skeleton contains a full 2x2 block")
        object.__setattr__(self, "mask", arr)


def _binary(mask) -> np.ndarray:
    if isinstance(mask, SegMask):
        return mask.labels > 0
    if isinstance(mask, Skeleton):
        return mask.mask
    return np.asarray(mask).astype(bool)


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")


def dice(pred: SegMask, gt: SegMask, cls: int) -> float:
    """Dice overlap 2|P&G| / (|P|+|G|) for one class; empty vs empty is 1."""
    p = pred.binary(cls)
    g = gt.binary(cls)
    _check_same_shape(p, g)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


def iou(pred: SegMask, gt: SegMask, cls: int) -> float:
    """Intersection over union for one class; empty vs empty is 1."""
    p = pred.binary(cls)
    g = gt.binary(cls)
    _check_same_shape(p, g)
    union = int((p | g).sum())
    if union == 0:
        return 1.0
    return int((p & g).sum()) / union


def miou(pred: SegMask, gt: SegMask) -> float:
    """Mean IoU over foreground classes (1..num_classes-1)."""
    classes = range(1, pred.num_classes)
    return float(np.mean([iou(pred, gt, k) for k in classes]))


def mean_dice(pred: SegMask, gt: SegMask) -> float:
    """Mean Dice over foreground classes."""
    classes = range(1, pred.num_classes)
    return float(np.mean([dice(pred, gt, k) for k in classes]))


# --- Zhang-Suen thinning -------------------------------------------------------


def _neighbors(p: np.ndarray):
    """The eight neighbor rasters of a padded binary image, clockwise from
    north: P2..P9."""
    return (p[:-2, 1:-1], p[:-2, 2:], p[1:-1, 2:], p[2:, 2:],
            p[2:, 1:-1], p[2:, :-2], p[1:-1, :-2], p[:-2, :-2])


def _thinning_pass(img: np.ndarray, step: int) -> bool:
    padded = np.pad(img, 1).astype(np.uint8)
    nb = _neighbors(padded)
    b = sum(n.astype(np.int64) for n in nb)
    ring = nb + (nb[0],)
    a = sum(((ring[i] == 0) & (ring[i + 1] == 1)).astype(np.int64)
            for i in range(8))
    p2, _, p4, _, p6, _, p8, _ = nb
    if step == 0:
        cond = ((p2 & p4 & p6) == 0) & ((p4 & p6 & p8) == 0)
    else:
        cond = ((p2 & p4 & p8) == 0) & ((p2 & p6 & p8) == 0)
    kill = img & (b >= 2) & (b <= 6) & (a == 1) & cond
    if not kill.any():
        return False
    img[kill] = False
    return True


def skeletonize(mask) -> Skeleton:
    """Morphological thinning to convergence (Zhang-Suen, two subiterations).

    The result is a subset of the foreground, at most one pixel wide, and
    idempotent under re-thinning.
    """
    img = _binary(mask).copy()
    changed = True
    while changed:
        changed = _thinning_pass(img, 0)
        changed = _thinning_pass(img, 1) or changed
    return Skeleton(img)


# --- clDice ---------------------------------------------------------------------


def cl_dice(pred, gt) -> float:
    """Centerline Dice of two binary masks.

    tprec = |skel(pred) & gt| / |skel(pred)|, tsens = |skel(gt) & pred| /
    |skel(gt)|; clDice is their harmonic mean. Both skeletons empty -> 1.0;
    exactly one empty -> 0.0.
    """
    p = _binary(pred)
    g = _binary(gt)
    _check_same_shape(p, g)
    sp = skeletonize(p).mask
    sg = skeletonize(g).mask
    np_, ng = int(sp.sum()), int(sg.sum())
    if np_ == 0 and ng == 0:
        return 1.0
    if np_ == 0 or ng == 0:
        return 0.0
    tprec = int((sp & g).sum()) / np_
    tsens = int((sg & p).sum()) / ng
    if tprec + tsens == 0.0:
        return 0.0
    return 2.0 * tprec * tsens / (tprec + tsens)


def mean_cl_dice(pred: SegMask, gt: SegMask) -> float:
    """Mean clDice over foreground classes of a multi-class mask."""
    classes = range(1, pred.num_classes)
    return float(np.mean([cl_dice(pred.binary(k), gt.binary(k))
                          for k in classes]))
