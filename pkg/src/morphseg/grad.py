"""Hand-written reverse-mode gradients for every differentiable kernel.

There is no tape: each forward kernel has an explicit backward that takes
the saved forward operands (and, where cheaper, the forward output) plus
the upstream gradient, and returns exact analytic input gradients. Every
backward here is validated against central finite differences by the
checks module and the test suite.
"""

from __future__ import annotations

import numpy as np

from .diffeo import warp_coords
from .tensor import _corner_indices, as_array, gelu, _GELU_C

__all__ = [
    "matmul_backward",
    "softmax_backward",
    "layer_norm_backward",
    "gelu_backward",
    "conv2d_backward",
    "grid_sample_backward",
    "bound_norm",
    "bound_norm_backward",
    "compose_offsets_backward",
    "exponentiate_backward",
    "upsample2",
    "upsample2_backward",
    "finite_diff_check",
]


def matmul_backward(a, b, g):
    """d(a @ b): returns (g @ b.T, a.T @ g)."""
    return g @ b.T, a.T @ g


def softmax_backward(y, g, axis: int = -1):
    """Jacobian-vector product through softmax given its output y."""
    return y * (g - np.sum(y * g, axis=axis, keepdims=True))


def layer_norm_backward(x, gamma, eps, g):
    """Gradients of layer_norm over the last axis: (g_x, g_gamma, g_beta)."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gxh = g * gamma
    g_x = inv * (gxh - gxh.mean(axis=-1, keepdims=True)
                 - xhat * (gxh * xhat).mean(axis=-1, keepdims=True))
    lead = tuple(range(x.ndim - 1))
    return g_x, (g * xhat).sum(axis=lead), g.sum(axis=lead)


def gelu_backward(x, g):
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    sech2 = 1.0 - t * t
    d = 0.5 * (1.0 + t) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
    return g * d


def conv2d_backward(x, kernel, g, stride: int = 1):
    """Gradients of conv2d: (g_x, g_kernel, g_bias)."""
    c_out, c_in, k, _ = kernel.shape
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]
    g_b = g.sum(axis=(1, 2))
    g_k = np.einsum("ohw,ihwkl->oikl", g, win, optimize=True)
    # scatter the kernel-weighted upstream back onto the padded input
    gk_full = np.tensordot(g, kernel, axes=([0], [0]))  # [Ho, Wo, Ci, k, k]
    g_xp = np.zeros_like(xp)
    ho, wo = g.shape[1:]
    for a in range(k):
        for b in range(k):
            g_xp[:, a:a + ho * stride:stride, b:b + wo * stride:stride] += \
                gk_full[:, :, :, a, b].transpose(2, 0, 1)
    h, w = x.shape[1:]
    return g_xp[:, p:p + h, p:p + w], g_k, g_b


def grid_sample_backward(x, coords, g):
    """Gradients of bilinear sampling w.r.t. image and coordinates.

    Image gradients scatter the four corner weights; coordinate gradients
    are the in-cell finite slopes, zeroed where the raw coordinate fell
    outside the clamped range (the clamp is flat there).
    """
    x = as_array(x)
    coords = as_array(coords)
    c, h, w = x.shape
    r0, c0, r1, c1, fr, fc = _corner_indices(x, coords)
    w00 = (1.0 - fr) * (1.0 - fc)
    w01 = (1.0 - fr) * fc
    w10 = fr * (1.0 - fc)
    w11 = fr * fc

    flat = np.zeros(c * h * w)
    chan = (np.arange(c) * (h * w))[:, None]
    g2 = g.reshape(c, -1)
    for rr, cc, wt in ((r0, c0, w00), (r0, c1, w01), (r1, c0, w10), (r1, c1, w11)):
        idx = (chan + (rr * w + cc).reshape(1, -1)).ravel()
        vals = (g2 * wt.reshape(1, -1)).ravel()
        flat += np.bincount(idx, weights=vals, minlength=flat.size)
    g_x = flat.reshape(c, h, w)

    x00 = x[:, r0, c0]
    x01 = x[:, r0, c1]
    x10 = x[:, r1, c0]
    x11 = x[:, r1, c1]
    slope_r = (1.0 - fc) * (x10 - x00) + fc * (x11 - x01)
    slope_c = (1.0 - fr) * (x01 - x00) + fr * (x11 - x10)
    raw_r = coords[..., 0]
    raw_c = coords[..., 1]
    in_r = (raw_r >= 0.0) & (raw_r <= h - 1.0)
    in_c = (raw_c >= 0.0) & (raw_c <= w - 1.0)
    g_r = (g * slope_r).sum(axis=0) * in_r
    g_c = (g * slope_c).sum(axis=0) * in_c
    return g_x, np.stack([g_r, g_c], axis=-1)


# --- norm-bounded saturation -------------------------------------------------
#
# v = s(r) * z with s(r) = tanh(r / b) / (r / b) and r the per-pixel norm of z:
# a radial squash that is the identity near zero and bounds |v| by b. The
# series branch keeps s and its slope accurate where r/b underflows.

_SMALL_U = 1e-4


def _sat_factors(z, bound):
    r2 = (z * z).sum(axis=0, keepdims=True)
    u = np.sqrt(r2) / bound
    small = u < _SMALL_U
    us = np.where(small, 1.0, u)  # avoid 0/0; series used where small
    s = np.where(small, 1.0 - u * u / 3.0, np.tanh(us) / us)
    # q = s'(u) / u, finite at u = 0
    sech2 = 1.0 / np.cosh(us) ** 2
    q = np.where(small, -2.0 / 3.0 + 8.0 * u * u / 15.0,
                 (us * sech2 - np.tanh(us)) / us ** 3)
    return s, q


def bound_norm(z, bound: float) -> np.ndarray:
    """Saturate a [2,H,W] vector field so each per-pixel norm is < bound."""
    s, _ = _sat_factors(z, bound)
    return s * z


def bound_norm_backward(z, bound: float, g):
    s, q = _sat_factors(z, bound)
    dot = (z * g).sum(axis=0, keepdims=True)
    return s * g + (q / bound ** 2) * z * dot


# --- deformation-field chain -------------------------------------------------


def compose_offsets_backward(outer, inner, g):
    """Gradients of compose_offsets: (g_outer, g_inner)."""
    coords = warp_coords(inner)
    g_outer, g_coords = grid_sample_backward(outer, coords, g)
    g_inner = g + np.moveaxis(g_coords, -1, 0)
    return g_outer, g_inner


def exponentiate_backward(trace: list[np.ndarray], g) -> np.ndarray:
    """Backprop through scaling and squaring, unrolling the n compositions.

    ``trace`` is the list from exponentiate_trace (length n + 1); returns
    the gradient w.r.t. the velocity offsets.
    """
    n = len(trace) - 1
    g_u = g
    for j in range(n - 1, -1, -1):
        g_outer, g_inner = compose_offsets_backward(trace[j], trace[j], g_u)
        g_u = g_outer + g_inner
    return g_u / float(2 ** n)


# --- resolution changes -------------------------------------------------------


def upsample2(x) -> np.ndarray:
    """Nearest-neighbor x2 upsampling of a [C,H,W] map."""
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def upsample2_backward(g) -> np.ndarray:
    c, h2, w2 = g.shape
    return g.reshape(c, h2 // 2, 2, w2 // 2, 2).sum(axis=(2, 4))


# --- finite-difference oracle -------------------------------------------------


def finite_diff_check(f, params: dict, analytic: dict, eps: float = 1e-5,
                      max_coords: int = 200, rng=None) -> float:
    """Worst relative error between analytic grads and central differences.

    ``f`` is a deterministic scalar function of the (mutable) arrays in
    ``params``; ``analytic`` maps the same names to precomputed gradients.
    Per tensor, up to ``max_coords`` coordinates are probed (all of them for
    small tensors). Relative error is |a - n| / max(|a|, |n|, 1e-8).
    """
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for name, value in params.items():
        grad = analytic[name]
        if not value.flags.c_contiguous:
            raise ValueError(f"{name} must be contiguous for in-place probing")
        flat = value.reshape(-1)
        gflat = grad.reshape(-1)
        count = flat.size
        idx = (np.arange(count) if count <= max_coords
               else rng.choice(count, size=max_coords, replace=False))
        for i in idx:
            keep = flat[i]
            flat[i] = keep + eps
            f_plus = f()
            flat[i] = keep - eps
            f_minus = f()
            flat[i] = keep
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise ValueError(f"non-finite loss while probing {name}[{i}]")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(gflat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst
