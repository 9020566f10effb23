"""Dense float64 arrays and the primitive kernels shared by every module.

Conventions used throughout the package:

- all numeric data is float64, row-major
- images / feature maps are ``[C, H, W]``
- spatial coordinates are ``(row, col)`` in pixel units
- sampling coordinates live in the last axis of a ``[..., 2]`` array
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "as_array",
    "grid_sample",
    "conv2d",
    "softmax",
    "matmul",
    "layer_norm",
    "gelu",
    "sample_grid",
]

LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Operand shapes violate a kernel's contract."""


def as_array(x) -> np.ndarray:
    """Coerce a Tensor or array-like to a float64 ndarray (no validation)."""
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """Validated dense float64 array.

    Construction copies the input, rejects non-finite values and zero-length
    extents, and freezes the buffer. Kernels in this package accept either a
    ``Tensor`` or a plain float64 ndarray; internal code passes ndarrays.
    """

    __slots__ = ("data", "name")

    def __init__(self, data, name: str | None = None):
        arr = np.array(data, dtype=np.float64, order="C")
        if any(e < 1 for e in arr.shape):
            raise ShapeError(f"zero-length extent in shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor values must be finite")
        arr.setflags(write=False)
        self.data = arr
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def flat(self) -> np.ndarray:
        """Row-major flat view of the values."""
        return self.data.reshape(-1)

    def validate(self) -> "Tensor":
        """Re-check the finiteness invariant; returns self."""
        if not np.all(np.isfinite(self.data)):
            raise ValueError("tensor values must be finite")
        return self

    def __array__(self, dtype=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"


def sample_grid(h: int, w: int) -> np.ndarray:
    """Integer lattice coordinates of an HxW raster, shape [H, W, 2]."""
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    return np.stack([rr, cc], axis=-1)


def _corner_indices(x: np.ndarray, coords: np.ndarray):
    """Shared bilinear setup: clamped corner indices and fractional weights."""
    _, H, W = x.shape
    r = np.clip(coords[..., 0], 0.0, float(H - 1))
    c = np.clip(coords[..., 1], 0.0, float(W - 1))
    r0 = np.clip(np.floor(r), 0, max(H - 2, 0)).astype(np.intp)
    c0 = np.clip(np.floor(c), 0, max(W - 2, 0)).astype(np.intp)
    r1 = np.minimum(r0 + 1, H - 1)
    c1 = np.minimum(c0 + 1, W - 1)
    fr = r - r0
    fc = c - c0
    return r0, c0, r1, c1, fr, fc


def grid_sample(x, coords) -> np.ndarray:
    """Bilinear sampling of an image at absolute pixel coordinates.

    ``x`` is ``[C, H, W]``; ``coords`` is ``[..., 2]`` holding (row, col)
    positions. Coordinates outside ``[0, extent - 1]`` are clamped to the
    border before interpolation. Sampling at the integer lattice reproduces
    the input bit-exactly. Returns ``[C, *coords.shape[:-1]]``.
    """
    x = as_array(x)
    coords = as_array(coords)
    if x.ndim != 3:
        raise ShapeError(f"expected a [C,H,W] image, got shape {x.shape}")
    if coords.ndim < 1 or coords.shape[-1] != x.ndim - 1:
        raise ShapeError(
            f"coords last axis must match spatial rank {x.ndim - 1}, "
            f"got coords shape {coords.shape}")
    r0, c0, r1, c1, fr, fc = _corner_indices(x, coords)
    x00 = x[:, r0, c0]
    x01 = x[:, r0, c1]
    x10 = x[:, r1, c0]
    x11 = x[:, r1, c1]
    w00 = (1.0 - fr) * (1.0 - fc)
    w01 = (1.0 - fr) * fc
    w10 = fr * (1.0 - fc)
    w11 = fr * fc
    return w00 * x00 + w01 * x01 + w10 * x10 + w11 * x11


def conv2d(x, kernel, bias, stride: int = 1) -> np.ndarray:
    """2-D cross-correlation with odd square kernel and zero padding (k-1)/2.

    With ``stride=1`` the spatial size is preserved; with larger strides the
    output is ``(H + 2p - k) // stride + 1`` per axis.
    """
    x = as_array(x)
    k = as_array(kernel)
    b = as_array(bias)
    if x.ndim != 3 or k.ndim != 4:
        raise ShapeError(f"conv2d expects [C,H,W] and [Co,Ci,k,k], got "
                         f"{x.shape} and {k.shape}")
    c_out, c_in, kh, kw = k.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"kernel must be square with odd size, got {kh}x{kw}")
    if c_in != x.shape[0]:
        raise ShapeError(f"channel mismatch: image {x.shape[0]}, kernel {c_in}")
    if b.shape != (c_out,):
        raise ShapeError(f"bias must have shape ({c_out},), got {b.shape}")
    p = (kh - 1) // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]
    out = np.einsum("oikl,ihwkl->ohw", k, win, optimize=True)
    return out + b[:, None, None]


def softmax(x, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (max-subtraction) along ``axis``."""
    x = as_array(x)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def matmul(a, b) -> np.ndarray:
    """Matrix product with an explicit inner-dimension check."""
    a = as_array(a)
    b = as_array(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def layer_norm(x, gamma, beta, eps: float = LAYER_NORM_EPS) -> np.ndarray:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = as_array(x)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    xhat = xc / np.sqrt(var + eps)
    return as_array(gamma) * xhat + as_array(beta)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x) -> np.ndarray:
    """Smooth GELU nonlinearity (tanh form)."""
    x = as_array(x)
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    return 0.5 * x * (1.0 + np.tanh(inner))
