"""Finite-difference oracles for every hand-written backward.

Each check builds a random small problem, defines a scalar loss as a fixed
random weighting of the kernel's output, computes analytic input gradients
with the hand-written backward, and compares them against central finite
differences. The whole-network check does the same through the full
forward/backward at 16x16.
"""

from __future__ import annotations

import numpy as np

from . import grad
from .attention import (WindowAttentionParams, block_backward, block_forward,
                        window_attention, window_attention_backward)
from .clustering import (ClusterAttentionParams, ClusterState,
                         cluster_attention, soft_assign, update_cores)
from .attention import (_cluster_attention_backward, _cluster_update_backward,
                        _soft_assign_backward)
from .diffeo import DeformationField, exponentiate_trace
from .model import (NetConfig, dice_loss_grad, flatten_params, init_params,
                    net_backward, net_forward)
from .tensor import conv2d, gelu, grid_sample, layer_norm, matmul, softmax

KERNEL_TOL = 1e-6
NETWORK_TOL = 1e-4


def _weighted(rng, shape):
    return rng.standard_normal(shape)


def check_matmul(rng) -> float:
    a = rng.standard_normal((5, 4))
    b = rng.standard_normal((4, 6))
    w = _weighted(rng, (5, 6))
    ga, gb = grad.matmul_backward(a, b, w)
    return grad.finite_diff_check(lambda: float((matmul(a, b) * w).sum()),
                                  {"a": a, "b": b}, {"a": ga, "b": gb},
                                  rng=rng)


def check_softmax(rng) -> float:
    x = rng.standard_normal((4, 7))
    w = _weighted(rng, (4, 7))
    y = softmax(x, axis=1)
    gx = grad.softmax_backward(y, w, axis=1)
    return grad.finite_diff_check(
        lambda: float((softmax(x, axis=1) * w).sum()),
        {"x": x}, {"x": gx}, rng=rng)


def check_layer_norm(rng) -> float:
    x = rng.standard_normal((6, 5))
    gamma = rng.standard_normal(5)
    beta = rng.standard_normal(5)
    w = _weighted(rng, (6, 5))
    gx, gg, gb = grad.layer_norm_backward(x, gamma, 1e-5, w)
    return grad.finite_diff_check(
        lambda: float((layer_norm(x, gamma, beta) * w).sum()),
        {"x": x, "gamma": gamma, "beta": beta},
        {"x": gx, "gamma": gg, "beta": gb}, rng=rng)


def check_gelu(rng) -> float:
    x = rng.standard_normal((5, 5))
    w = _weighted(rng, (5, 5))
    gx = grad.gelu_backward(x, w)
    return grad.finite_diff_check(lambda: float((gelu(x) * w).sum()),
                                  {"x": x}, {"x": gx}, rng=rng)


def check_conv2d(rng) -> float:
    x = rng.standard_normal((2, 6, 6))
    k = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    w = _weighted(rng, (3, 6, 6))
    gx, gk, gb = grad.conv2d_backward(x, k, w)
    return grad.finite_diff_check(
        lambda: float((conv2d(x, k, b) * w).sum()),
        {"x": x, "k": k, "b": b}, {"x": gx, "k": gk, "b": gb}, rng=rng)


def check_conv2d_strided(rng) -> float:
    x = rng.standard_normal((2, 8, 8))
    k = rng.standard_normal((4, 2, 3, 3))
    b = rng.standard_normal(4)
    w = _weighted(rng, (4, 4, 4))
    gx, gk, gb = grad.conv2d_backward(x, k, w, stride=2)
    return grad.finite_diff_check(
        lambda: float((conv2d(x, k, b, stride=2) * w).sum()),
        {"x": x, "k": k, "b": b}, {"x": gx, "k": gk, "b": gb}, rng=rng)


def check_grid_sample(rng) -> float:
    x = rng.standard_normal((2, 7, 7))
    # keep probes off cell edges so the piecewise-linear kernel is smooth
    coords = rng.uniform(0.3, 5.7, size=(4, 4, 2))
    coords += 0.2 * (np.abs(coords - np.round(coords)) < 0.05)
    w = _weighted(rng, (2, 4, 4))
    gx, gc = grad.grid_sample_backward(x, coords, w)
    return grad.finite_diff_check(
        lambda: float((grid_sample(x, coords) * w).sum()),
        {"x": x, "coords": coords}, {"x": gx, "coords": gc}, rng=rng)


def check_bound_norm(rng) -> float:
    z = rng.standard_normal((2, 5, 5)) * 3.0
    w = _weighted(rng, (2, 5, 5))
    gz = grad.bound_norm_backward(z, 4.0, w)
    return grad.finite_diff_check(
        lambda: float((grad.bound_norm(z, 4.0) * w).sum()),
        {"z": z}, {"z": gz}, rng=rng)


def check_exponentiate(rng) -> float:
    v = 0.25 * rng.standard_normal((2, 8, 8))
    n = 4
    w = _weighted(rng, (2, 8, 8))
    trace = exponentiate_trace(v, n)
    gv = grad.exponentiate_backward(trace, w)
    return grad.finite_diff_check(
        lambda: float((exponentiate_trace(v, n)[-1] * w).sum()),
        {"v": v}, {"v": gv}, rng=rng)


def check_soft_assign(rng) -> float:
    feats = rng.standard_normal((6, 4))
    state = ClusterState.random_init(3, 4, rng)
    w = _weighted(rng, (6, 3))
    a = soft_assign(feats, state)
    gf, gl, gm = _soft_assign_backward(feats, state.lam, a, w)

    def loss():
        return float((soft_assign(feats, state) * w).sum())

    return grad.finite_diff_check(
        loss, {"feats": feats, "lam": state.lam, "mu": state.mu},
        {"feats": gf, "lam": gl, "mu": gm}, rng=rng)


def check_update_cores(rng) -> float:
    worst = 0.0
    for mode in ("recentered", "displacement"):
        feats = rng.standard_normal((6, 4))
        state = ClusterState.random_init(3, 4, rng)
        w = _weighted(rng, (3, 4))

        def loss():
            return float((update_cores(feats, state, mode=mode) * w).sum())

        a = soft_assign(feats, state)
        mass = a.sum(axis=0)
        gf_dir, gc, ga = _cluster_update_backward(feats, state.cores, a, mass,
                                                  w, mode=mode)
        gf_as, gl, gm = _soft_assign_backward(feats, state.lam, a, ga)
        worst = max(worst, grad.finite_diff_check(
            loss,
            {"feats": feats, "cores": state.cores, "lam": state.lam,
             "mu": state.mu},
            {"feats": gf_dir + gf_as, "cores": gc, "lam": gl, "mu": gm},
            rng=rng))
    return worst


def check_cluster_attention(rng) -> float:
    feats = rng.standard_normal((6, 8))
    cores = rng.standard_normal((3, 8))
    p = ClusterAttentionParams.random_init(8, 2, rng)
    w = _weighted(rng, (6, 8))
    out, cache = cluster_attention(feats, cores, p, want_cache=True)
    gf, gn, gp = _cluster_attention_backward(cache, p.wq, p.wk, p.wv, w)
    return grad.finite_diff_check(
        lambda: float((cluster_attention(feats, cores, p) * w).sum()),
        {"feats": feats, "cores": cores, "wq": p.wq, "wk": p.wk, "wv": p.wv},
        {"feats": gf, "cores": gn, **gp}, rng=rng)


def check_window_attention(rng) -> float:
    p = WindowAttentionParams.random_init(8, 2, (2, 2), rng)
    p.bias_table[...] = 0.3 * rng.standard_normal(p.bias_table.shape)
    wins = rng.standard_normal((3, 4, 8))
    w = _weighted(rng, (3, 4, 8))
    out, cache = window_attention(wins, p, want_cache=True)
    g_wins, gp = window_attention_backward(cache, p, w)
    return grad.finite_diff_check(
        lambda: float((window_attention(wins, p) * w).sum()),
        {"wins": wins, "wq": p.wq, "wk": p.wk, "wv": p.wv, "wo": p.wo,
         "bias": p.bias_table},
        {"wins": g_wins, **gp}, rng=rng)


def check_dice_loss(rng) -> float:
    logits = rng.standard_normal((3, 5, 5))
    labels = rng.integers(0, 3, size=(5, 5))
    _, g = dice_loss_grad(logits, labels, 3)
    return grad.finite_diff_check(
        lambda: dice_loss_grad(logits, labels, 3)[0],
        {"logits": logits}, {"logits": g}, rng=rng)


def check_block(rng) -> float:
    cfg = NetConfig(base_channels=4, stages=1, heads=2, n_clusters=3,
                    window=2, n_squaring=3)
    from .model import _block_init

    bp = _block_init(cfg, 4, rng)
    x = rng.standard_normal((4, 4, 4))
    voff = 0.3 * rng.standard_normal((2, 4, 4))
    trace_f = exponentiate_trace(voff, cfg.n_squaring)
    trace_b = exponentiate_trace(-voff, cfg.n_squaring)
    phi = DeformationField(trace_f[-1], cfg.n_squaring)
    phi_inv = DeformationField(trace_b[-1], cfg.n_squaring)
    w = _weighted(rng, (4, 4, 4))

    def loss():
        tf = exponentiate_trace(voff, cfg.n_squaring)
        tb = exponentiate_trace(-voff, cfg.n_squaring)
        out = block_forward(x, bp, cfg,
                            DeformationField(tf[-1], cfg.n_squaring),
                            DeformationField(tb[-1], cfg.n_squaring),
                            shift=1)
        return float((out * w).sum())

    out, cache = block_forward(x, bp, cfg, phi, phi_inv, shift=1,
                               want_cache=True)
    g_x, g_bp, g_phi, g_phi_inv = block_backward(cache, bp, cfg, w)
    g_voff = grad.exponentiate_backward(trace_f, g_phi) \
        - grad.exponentiate_backward(trace_b, g_phi_inv)
    flat_p = flatten_params(bp)
    flat_g = flatten_params(g_bp)
    probes = {"x": x, "voff": voff, **flat_p}
    analytic = {"x": g_x, "voff": g_voff, **flat_g}
    return grad.finite_diff_check(loss, probes, analytic, max_coords=6,
                                  rng=rng)


KERNEL_CHECKS = {
    "matmul": check_matmul,
    "softmax": check_softmax,
    "layer_norm": check_layer_norm,
    "gelu": check_gelu,
    "conv2d": check_conv2d,
    "conv2d_strided": check_conv2d_strided,
    "grid_sample": check_grid_sample,
    "bound_norm": check_bound_norm,
    "exponentiate": check_exponentiate,
    "soft_assign": check_soft_assign,
    "update_cores": check_update_cores,
    "cluster_attention": check_cluster_attention,
    "window_attention": check_window_attention,
    "dice_loss": check_dice_loss,
    "block": check_block,
}


def run_kernel_check(name: str, seeds=range(3)) -> float:
    worst = 0.0
    for seed in seeds:
        worst = max(worst, KERNEL_CHECKS[name](np.random.default_rng(seed)))
    return worst


def network_check(seed: int = 0, max_coords: int = 6) -> float:
    """Finite differences through the entire net + Dice loss at 16x16."""
    rng = np.random.default_rng(seed)
    cfg = NetConfig()
    params = init_params(cfg, rng)
    image = rng.standard_normal((1, 16, 16))
    labels = (rng.uniform(size=(16, 16)) < 0.4).astype(np.int64)

    def loss():
        return dice_loss_grad(net_forward(params, cfg, image), labels,
                              cfg.num_classes)[0]

    logits, cache = net_forward(params, cfg, image, want_cache=True)
    _, g_logits = dice_loss_grad(logits, labels, cfg.num_classes)
    grads = net_backward(params, cfg, cache, g_logits)
    return grad.finite_diff_check(loss, flatten_params(params),
                                  flatten_params(grads),
                                  max_coords=max_coords, rng=rng)
