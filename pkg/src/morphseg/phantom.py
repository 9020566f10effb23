"""Synthetic vascular phantoms: curved tubes with exact ground-truth masks.

Each phantom draws a few sinusoidally perturbed curves, optionally spawns a
single-level branch per curve, and paints them with a per-tube radius. The
mask is exactly the painted foreground; the image is the mask scaled by a
contrast plus Gaussian noise. Everything is a pure function of the seed.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .io import read_mtk1, write_mtk1
from .metrics import SegMask

__all__ = [
    "PhantomSpec",
    "PRESETS",
    "generate",
    "make_dataset",
    "load_split",
]


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 32
    n_tubes: int = 2
    radius_min: float = 1.0
    radius_max: float = 2.0
    curvature: float = 5.0
    bifurcation_prob: float = 0.3
    contrast: float = 1.0
    noise_sigma: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.size < 32:
            raise ValueError(f"size must be >= 32, got {self.size}")
        if self.radius_min < 1.0 or self.radius_max < self.radius_min:
            raise ValueError(f"invalid radius range "
                             f"[{self.radius_min}, {self.radius_max}]")
        if self.n_tubes < 1:
            raise ValueError("need at least one tube")


PRESETS = {
    "curved": PhantomSpec(curvature=5.0, radius_min=1.0, radius_max=2.0,
                          bifurcation_prob=0.3),
    "straight": PhantomSpec(curvature=0.0, radius_min=2.0, radius_max=3.0,
                            bifurcation_prob=0.0),
}


def curve_points(start, direction, length, amplitude, freq, phase,
                 step: float = 0.25) -> np.ndarray:
    """Dense samples of a sinusoidally perturbed segment, shape [n, 2]."""
    direction = np.asarray(direction, dtype=np.float64)
    direction = direction / np.linalg.norm(direction)
    perp = np.array([-direction[1], direction[0]])
    n = max(2, int(np.ceil(length / step)) + 1)
    t = np.linspace(0.0, 1.0, n)
    wobble = amplitude * np.sin(2.0 * np.pi * freq * t + phase)
    return (np.asarray(start) + t[:, None] * length * direction
            + wobble[:, None] * perp)


def paint_curve(mask: np.ndarray, points: np.ndarray, radius: float) -> None:
    """Paint disks of the given radius along a point chain, in place.

    Points are clamped so disks stay inside the frame, which keeps each
    painted tube 8-connected.
    """
    size = mask.shape[0]
    rad = int(np.ceil(radius))
    lo, hi = radius, size - 1.0 - radius
    pts = np.clip(points, lo, max(lo, hi))
    dr, dc = np.meshgrid(np.arange(-rad, rad + 1), np.arange(-rad, rad + 1),
                         indexing="ij")
    disk = (dr ** 2 + dc ** 2) <= radius ** 2
    drs, dcs = dr[disk], dc[disk]
    rows = (np.round(pts[:, 0]).astype(int)[:, None] + drs[None, :]).ravel()
    cols = (np.round(pts[:, 1]).astype(int)[:, None] + dcs[None, :]).ravel()
    keep = (rows >= 0) & (rows < size) & (cols >= 0) & (cols < mask.shape[1])
    mask[rows[keep], cols[keep]] = True


def _rotate(v: np.ndarray, angle: float) -> np.ndarray:
    ca, sa = np.cos(angle), np.sin(angle)
    return np.array([ca * v[0] - sa * v[1], sa * v[0] + ca * v[1]])


def generate(spec: PhantomSpec):
    """Render one phantom: (image [1,H,W], mask SegMask with labels {0,1})."""
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    size = spec.size
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(spec.n_tubes):
        radius = rng.uniform(spec.radius_min, spec.radius_max)
        start = rng.uniform(0.15 * size, 0.85 * size, size=2)
        angle = rng.uniform(0.0, 2.0 * np.pi)
        direction = np.array([np.cos(angle), np.sin(angle)])
        length = rng.uniform(0.7 * size, 1.1 * size)
        freq = rng.uniform(0.8, 1.6)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        pts = curve_points(start, direction, length, spec.curvature, freq,
                           phase)
        paint_curve(mask, pts, radius)
        if rng.uniform() < spec.bifurcation_prob:
            t0 = rng.uniform(0.3, 0.7)
            origin = pts[int(t0 * (len(pts) - 1))]
            branch_dir = _rotate(direction,
                                 rng.choice([-1.0, 1.0])
                                 * rng.uniform(np.pi / 6, np.pi / 3))
            branch = curve_points(origin, branch_dir, 0.4 * length,
                                  0.5 * spec.curvature, freq, phase)
            paint_curve(mask, branch, max(1.0, 0.8 * radius))
    noise = spec.noise_sigma * rng.standard_normal((size, size)) \
        if spec.noise_sigma > 0 else 0.0
    image = (spec.contrast * mask.astype(np.float64) + noise)[None]
    return image, SegMask(mask.astype(np.int64), 2)


def _sample_seeds(spec: PhantomSpec, count: int) -> list[int]:
    state = np.random.SeedSequence(spec.seed).generate_state(count)
    return [int(s) for s in state]


def make_dataset(spec: PhantomSpec, n_train: int, n_eval: int, out_dir) -> Path:
    """Write train/ and eval/ splits of MTK1 pairs plus per-split manifests.

    Each manifest line is ``<image file>\t<mask file>`` relative to the
    split directory; regeneration with the same spec is byte-identical.
    """
    out = Path(out_dir)
    seeds = _sample_seeds(spec, n_train + n_eval)
    for split, count, offset in (("train", n_train, 0),
                                 ("eval", n_eval, n_train)):
        split_dir = out / split
        split_dir.mkdir(parents=True, exist_ok=True)
        lines = []
        for i in range(count):
            image, mask = generate(replace(spec, seed=seeds[offset + i]))
            img_name = f"img_{i:04d}.mtk1"
            msk_name = f"msk_{i:04d}.mtk1"
            write_mtk1(split_dir / img_name, image)
            write_mtk1(split_dir / msk_name, mask.labels.astype(np.float64))
            lines.append(f"{img_name}\t{msk_name}")
        (split_dir / "manifest.txt").write_text("\n".join(lines) + "\n")
    return out


def load_split(split_dir) -> list[tuple[np.ndarray, SegMask]]:
    """Read a split back as (image, mask) pairs in manifest order."""
    split_dir = Path(split_dir)
    pairs = []
    manifest = split_dir / "manifest.txt"
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        img_name, msk_name = line.split("\t")
        image = read_mtk1(split_dir / img_name)
        labels = read_mtk1(split_dir / msk_name)
        num_classes = max(2, int(labels.max()) + 1)
        pairs.append((image, SegMask(labels.astype(np.int64), num_classes)))
    return pairs
