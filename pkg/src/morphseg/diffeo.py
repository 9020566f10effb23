"""Diffeomorphic deformation fields from stationary velocity fields.

A velocity field is integrated over unit time by scaling and squaring:
start from ``Id + v / 2**n`` and self-compose the field n times. For
bounded, smooth velocities the result is a diffeomorphism (positive
Jacobian determinant everywhere), and its inverse is obtained by
integrating ``-v``.

Fields are stored as pixel-unit displacement arrays of shape [2, H, W]
(row component first); a deformation maps ``x -> x + offset(x)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, as_array, grid_sample, sample_grid

__all__ = [
    "VelocityField",
    "DeformationField",
    "compose",
    "compose_offsets",
    "exponentiate",
    "exponentiate_trace",
    "invert",
    "jacobian_determinant",
    "smooth_random_velocity",
]

DEFAULT_STEPS = 7

# norm check slack: the bound is produced by saturating arithmetic and may
# round a few ulps above the nominal value
_NORM_SLACK = 1e-9


def _check_field_array(offsets) -> np.ndarray:
    arr = as_array(offsets)
    if arr.ndim != 3 or arr.shape[0] != 2:
        raise ShapeError(f"displacement field must be [2,H,W], got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("displacement field must be finite")
    return arr


@dataclass(frozen=True)
class VelocityField:
    """Stationary velocity field with a declared magnitude bound.

    ``offsets[0]`` is the row velocity, ``offsets[1]`` the column velocity,
    both in pixels per unit time. The maximum per-pixel Euclidean norm must
    not exceed ``v_max``.
    """

    offsets: np.ndarray
    v_max: float

    def __post_init__(self):
        arr = _check_field_array(self.offsets)
        object.__setattr__(self, "offsets", arr)
        if self.v_max <= 0:
            raise ValueError(f"v_max must be positive, got {self.v_max}")
        norm = self.max_norm()
        if norm > self.v_max * (1.0 + _NORM_SLACK) + 1e-12:
            raise ValueError(
                f"velocity norm {norm:.6g} exceeds declared bound {self.v_max}")

    def max_norm(self) -> float:
        return float(np.sqrt((self.offsets ** 2).sum(axis=0)).max())

    def negated(self) -> "VelocityField":
        return VelocityField(-self.offsets, self.v_max)

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return self.offsets.shape[1:]


@dataclass(frozen=True)
class DeformationField:
    """Displacement form of a deformation: phi(x) = x + offsets(x)."""

    offsets: np.ndarray
    step_count: int = 0

    def __post_init__(self):
        arr = _check_field_array(self.offsets)
        object.__setattr__(self, "offsets", arr)

    @classmethod
    def identity(cls, h: int, w: int) -> "DeformationField":
        return cls(np.zeros((2, h, w)), 0)

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return self.offsets.shape[1:]

    def max_offset(self) -> float:
        return float(np.sqrt((self.offsets ** 2).sum(axis=0)).max())


def warp_coords(offsets: np.ndarray) -> np.ndarray:
    """Absolute sampling coordinates for a displacement array: grid + offsets."""
    _, h, w = offsets.shape
    return sample_grid(h, w) + np.moveaxis(offsets, 0, -1)


def compose_offsets(outer: np.ndarray, inner: np.ndarray) -> np.ndarray:
    """Displacements of outer(inner(x)): inner(x) + outer sampled at x+inner(x)."""
    return inner + grid_sample(outer, warp_coords(inner))


def compose(outer: DeformationField, inner: DeformationField) -> DeformationField:
    """Composition outer o inner on matching rasters (border-clamped sampling)."""
    if outer.spatial_shape != inner.spatial_shape:
        raise ShapeError(f"field shapes differ: {outer.spatial_shape} "
                         f"vs {inner.spatial_shape}")
    out = compose_offsets(outer.offsets, inner.offsets)
    return DeformationField(out, max(outer.step_count, inner.step_count))


def exponentiate_trace(v_offsets: np.ndarray, n: int) -> list[np.ndarray]:
    """All intermediate fields of scaling and squaring.

    Returns ``n + 1`` displacement arrays; the first is ``v / 2**n`` and the
    last is the unit-time deformation. The full list is what gradient code
    needs to differentiate through the squaring recurrence.
    """
    if n < 1:
        raise ValueError(f"step count must be >= 1, got {n}")
    fields = [v_offsets / float(2 ** n)]
    for _ in range(n):
        fields.append(compose_offsets(fields[-1], fields[-1]))
    return fields


def exponentiate(v: VelocityField, n: int = DEFAULT_STEPS) -> DeformationField:
    """Integrate a stationary velocity field over unit time.

    Choose n so that ``v.max_norm() / 2**n`` stays well below half a pixel;
    the initial step is then sub-pixel and every squaring preserves
    invertibility.
    """
    fields = exponentiate_trace(v.offsets, n)
    return DeformationField(fields[-1], n)


def invert(v: VelocityField, n: int = DEFAULT_STEPS) -> DeformationField:
    """Inverse deformation, obtained by integrating the negated velocity."""
    return exponentiate(v.negated(), n)


def jacobian_determinant(phi: DeformationField) -> np.ndarray:
    """Per-pixel determinant of the Jacobian of x + offsets(x).

    Central differences at interior pixels, one-sided at borders. Positive
    values certify local invertibility.
    """
    h, w = phi.spatial_shape
    if h < 3 or w < 3:
        raise ShapeError(f"need at least 3x3 raster, got {h}x{w}")
    o_r, o_c = phi.offsets
    dr_or, dc_or = np.gradient(o_r)
    dr_oc, dc_oc = np.gradient(o_c)
    return (1.0 + dr_or) * (1.0 + dc_oc) - dc_or * dr_oc


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(round(3.0 * sigma)))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def _smooth_axis(a: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = (len(kernel) - 1) // 2
    moved = np.moveaxis(a, axis, -1)
    padded = np.pad(moved, [(0, 0)] * (moved.ndim - 1) + [(radius, radius)],
                    mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, len(kernel), axis=-1)
    return np.moveaxis(win @ kernel, -1, axis)


def smooth_random_velocity(h: int, w: int, v_max: float, rng,
                           sigma: float = 6.0) -> VelocityField:
    """Gaussian-smoothed random velocity field scaled to max norm v_max."""
    noise = rng.standard_normal((2, h, w))
    for axis in (1, 2):
        noise = _smooth_axis(noise, _gaussian_kernel(sigma), axis)
    norm = np.sqrt((noise ** 2).sum(axis=0)).max()
    if norm < 1e-12:
        return VelocityField(np.zeros((2, h, w)), v_max)
    return VelocityField(noise * (v_max / norm), v_max)
