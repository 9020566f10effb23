"""Windowed self-attention and the fused spatial + semantic transformer block.

The block runs three residual sublayers in sequence:

1. spatial: layer norm, dense warp by the stage's deformation field, window
   partition (with a half-window cyclic shift on every second block),
   multi-head window attention with relative position bias, merge, inverse
   shift, warp back with the inverse field, residual add;
2. semantic: layer norm, soft K-means core update over all tokens, cross
   attention from tokens to the updated cores, residual add;
3. a two-layer GELU MLP with residual add.

Warping back with the inverse field keeps the residual stream spatially
aligned, so zero attention/MLP weights make the block an exact identity.
``fusion="parallel-sum"`` feeds the semantic sublayer from the block input
instead of the spatial output and sums all branches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import grad
from .clustering import (ClusterAttentionParams, ClusterState,
                         cluster_attention, soft_assign, UPDATE_EPS)
from .diffeo import warp_coords
from .patches import cyclic_shift, window_merge, window_partition
from .tensor import (LAYER_NORM_EPS, ShapeError, as_array, gelu, grid_sample,
                     layer_norm, softmax)

__all__ = [
    "WindowAttentionParams",
    "relative_position_index",
    "window_attention",
    "window_attention_backward",
    "block_forward",
    "block_backward",
]

_REL_INDEX_CACHE: dict[tuple[int, int], np.ndarray] = {}


def relative_position_index(window: tuple[int, int]) -> np.ndarray:
    """Bias-table index for every (query, key) pair inside a window, [L, L]."""
    key = tuple(window)
    if key not in _REL_INDEX_CACHE:
        wh, ww = window
        pos = np.array([(i, j) for i in range(wh) for j in range(ww)])
        rel = pos[:, None, :] - pos[None, :, :]
        idx = (rel[..., 0] + wh - 1) * (2 * ww - 1) + (rel[..., 1] + ww - 1)
        _REL_INDEX_CACHE[key] = idx.astype(np.intp)
    return _REL_INDEX_CACHE[key]


@dataclass
class WindowAttentionParams:
    """Projections and relative position bias for window self-attention."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    bias_table: np.ndarray
    heads: int
    window: tuple[int, int]

    def __post_init__(self):
        c = as_array(self.wq).shape[0]
        for name in ("wq", "wk", "wv", "wo"):
            w = as_array(getattr(self, name))
            setattr(self, name, w)
            if w.shape != (c, c):
                raise ShapeError(f"{name} must be [{c},{c}], got {w.shape}")
        if c % self.heads:
            raise ShapeError(f"width {c} not divisible by {self.heads} heads")
        wh, ww = self.window
        table_rows = (2 * wh - 1) * (2 * ww - 1)
        self.bias_table = as_array(self.bias_table)
        if self.bias_table.shape != (table_rows, self.heads):
            raise ShapeError(f"bias table must be [{table_rows},{self.heads}], "
                             f"got {self.bias_table.shape}")

    @classmethod
    def random_init(cls, c: int, heads: int, window: tuple[int, int],
                    rng) -> "WindowAttentionParams":
        s = 1.0 / np.sqrt(c)
        wh, ww = window
        return cls(rng.standard_normal((c, c)) * s,
                   rng.standard_normal((c, c)) * s,
                   rng.standard_normal((c, c)) * s,
                   rng.standard_normal((c, c)) * s,
                   np.zeros(((2 * wh - 1) * (2 * ww - 1), heads)),
                   heads, tuple(window))


def window_attention(wins, p: WindowAttentionParams, want_cache: bool = False):
    """Multi-head self-attention inside each window, shape-preserving."""
    wins = as_array(wins)
    nw, l, c = wins.shape
    wh, ww = p.window
    if l != wh * ww:
        raise ShapeError(f"token count {l} != window area {wh * ww}")
    dh = c // p.heads
    scale = dh ** -0.5
    q = wins @ p.wq
    k = wins @ p.wk
    v = wins @ p.wv

    def split(t):
        return t.reshape(nw, l, p.heads, dh).transpose(0, 2, 1, 3)

    qh, kh, vh = split(q), split(k), split(v)
    rel = relative_position_index(p.window)
    bias = p.bias_table[rel].transpose(2, 0, 1)       # [heads, L, L]
    logits = qh @ kh.transpose(0, 1, 3, 2) * scale + bias[None]
    attn = softmax(logits, axis=-1)
    out_h = attn @ vh
    merged = out_h.transpose(0, 2, 1, 3).reshape(nw, l, c)
    out = merged @ p.wo
    if want_cache:
        return out, (wins, qh, kh, vh, attn, merged, rel, scale)
    return out


def window_attention_backward(cache, p: WindowAttentionParams, g_out):
    """Gradients of window_attention: (g_windows, dict of parameter grads)."""
    wins, qh, kh, vh, attn, merged, rel, scale = cache
    nw, l, c = wins.shape
    dh = c // p.heads
    g_wo = merged.reshape(-1, c).T @ g_out.reshape(-1, c)
    g_merged = g_out @ p.wo.T
    g_oh = g_merged.reshape(nw, l, p.heads, dh).transpose(0, 2, 1, 3)
    g_attn = g_oh @ vh.transpose(0, 1, 3, 2)
    g_vh = attn.transpose(0, 1, 3, 2) @ g_oh
    g_logits = attn * (g_attn - (g_attn * attn).sum(axis=-1, keepdims=True))
    g_table = np.zeros_like(p.bias_table)
    np.add.at(g_table, rel.reshape(-1),
              g_logits.sum(axis=0).transpose(1, 2, 0).reshape(l * l, p.heads))
    g_qh = g_logits @ kh * scale
    g_kh = g_logits.transpose(0, 1, 3, 2) @ qh * scale

    def unsplit(t):
        return t.transpose(0, 2, 1, 3).reshape(nw, l, c)

    g_q, g_k, g_v = unsplit(g_qh), unsplit(g_kh), unsplit(g_vh)
    flat = wins.reshape(-1, c)
    grads = {
        "wq": flat.T @ g_q.reshape(-1, c),
        "wk": flat.T @ g_k.reshape(-1, c),
        "wv": flat.T @ g_v.reshape(-1, c),
        "wo": g_wo,
        "bias": g_table,
    }
    g_wins = g_q @ p.wq.T + g_k @ p.wk.T + g_v @ p.wv.T
    return g_wins, grads


def _to_tokens(x: np.ndarray) -> np.ndarray:
    c = x.shape[0]
    return x.reshape(c, -1).T


def _to_map(t: np.ndarray, h: int, w: int) -> np.ndarray:
    return t.T.reshape(-1, h, w)


def block_forward(x, bp: dict, cfg, phi=None, phi_inv=None, shift: int = 0,
                  want_cache: bool = False):
    """One fused block. ``bp`` is the block's parameter dict; ``cfg`` needs
    ``window``, ``heads``, ``use_sca`` and ``fusion`` attributes. ``phi`` /
    ``phi_inv`` are the stage's deformation field and its inverse (None
    disables the warp path)."""
    x = as_array(x)
    c, h, w = x.shape
    win = (cfg.window, cfg.window)
    cache: dict = {"shift": shift, "phi": phi is not None}

    # --- spatial sublayer ---
    t = _to_tokens(x)
    ln1 = bp["ln_spatial"]
    t_ln = layer_norm(t, ln1["gamma"], ln1["beta"])
    cache["sp_in"] = t
    s = _to_map(t_ln, h, w)
    if phi is not None:
        coords_f = warp_coords(phi.offsets)
        cache["warp_src"] = s
        cache["coords_f"] = coords_f
        s = grid_sample(s, coords_f)
    if shift:
        s = cyclic_shift(s, (-shift, -shift))
    wins = window_partition(s, win)
    attn_p = WindowAttentionParams(bp["attn"]["wq"], bp["attn"]["wk"],
                                   bp["attn"]["wv"], bp["attn"]["wo"],
                                   bp["attn"]["bias"], cfg.heads, win)
    wins_out, attn_cache = window_attention(wins, attn_p, want_cache=True)
    cache["attn"] = attn_cache
    s2 = window_merge(wins_out, (h, w), win)
    if shift:
        s2 = cyclic_shift(s2, (shift, shift))
    if phi_inv is not None:
        coords_b = warp_coords(phi_inv.offsets)
        cache["unwarp_src"] = s2
        cache["coords_b"] = coords_b
        s2 = grid_sample(s2, coords_b)
    x1 = x + s2

    # --- semantic sublayer ---
    parallel = cfg.fusion == "parallel-sum"
    if cfg.use_sca:
        sem_src = x if parallel else x1
        t1 = _to_tokens(sem_src)
        ln2 = bp["ln_cluster"]
        t1_ln = layer_norm(t1, ln2["gamma"], ln2["beta"])
        cl = bp["cluster"]
        state = ClusterState(cl["cores"], cl["lam"], cl["mu"])
        assign = soft_assign(t1_ln, state)
        mass = assign.sum(axis=0)
        moment = assign.T @ t1_ln
        denom = np.maximum(mass, UPDATE_EPS)
        new_cores = cl["cores"] + (moment - mass[:, None] * cl["cores"]) \
            / denom[:, None]
        cap = ClusterAttentionParams(cl["wq"], cl["wk"], cl["wv"], cfg.heads)
        sem_out, cl_attn_cache = cluster_attention(t1_ln, new_cores, cap,
                                                   want_cache=True)
        cache["sem_in"] = t1
        cache["sem_ln"] = t1_ln
        cache["assign"] = assign
        cache["mass"] = mass
        cache["cl_attn"] = cl_attn_cache
        x2 = x1 + _to_map(sem_out, h, w)
    else:
        x2 = x1

    # --- MLP sublayer ---
    t2 = _to_tokens(x2)
    ln3 = bp["ln_mlp"]
    t2_ln = layer_norm(t2, ln3["gamma"], ln3["beta"])
    mlp = bp["mlp"]
    z1 = t2_ln @ mlp["w1"] + mlp["b1"]
    a1 = gelu(z1)
    z2 = a1 @ mlp["w2"] + mlp["b2"]
    cache["mlp_in"] = t2
    cache["mlp_ln"] = t2_ln
    cache["mlp_z1"] = z1
    cache["mlp_a1"] = a1
    x3 = x2 + _to_map(z2, h, w)
    if want_cache:
        return x3, cache
    return x3


def block_backward(cache, bp: dict, cfg, g_out):
    """Gradients of block_forward.

    Returns ``(g_x, g_bp, g_phi, g_phi_inv)`` where ``g_bp`` mirrors the
    block parameter dict and the field gradients are [2,H,W] arrays (None
    when the warp path was disabled).
    """
    g_out = as_array(g_out)
    c, h, w = g_out.shape
    win = (cfg.window, cfg.window)
    shift = cache["shift"]
    g_bp: dict = {}

    # --- MLP sublayer ---
    mlp = bp["mlp"]
    g_z2 = _to_tokens(g_out)
    g_bp["mlp"] = {"b2": g_z2.sum(axis=0)}
    g_a1, g_bp["mlp"]["w2"] = grad.matmul_backward(cache["mlp_a1"], mlp["w2"], g_z2)
    g_z1 = grad.gelu_backward(cache["mlp_z1"], g_a1)
    g_bp["mlp"]["b1"] = g_z1.sum(axis=0)
    g_tln, g_bp["mlp"]["w1"] = grad.matmul_backward(cache["mlp_ln"], mlp["w1"], g_z1)
    ln3 = bp["ln_mlp"]
    g_t2, g_g3, g_b3 = grad.layer_norm_backward(cache["mlp_in"], ln3["gamma"],
                                                LAYER_NORM_EPS, g_tln)
    g_bp["ln_mlp"] = {"gamma": g_g3, "beta": g_b3}
    g_x2 = g_out + _to_map(g_t2, h, w)

    # --- semantic sublayer ---
    parallel = cfg.fusion == "parallel-sum"
    g_sem_src = None
    if cfg.use_sca:
        cl = bp["cluster"]
        g_sem = _to_tokens(g_x2)
        fc = cache["cl_attn"]
        g_f_attn, g_new, attn_grads = _cluster_attention_backward(
            fc, cl["wq"], cl["wk"], cl["wv"], g_sem)
        feats = cache["sem_ln"]
        assign = cache["assign"]
        mass = cache["mass"]
        g_f_up, g_cores, g_assign = _cluster_update_backward(
            feats, cl["cores"], assign, mass, g_new)
        g_f_as, g_lam, g_mu = _soft_assign_backward(feats, cl["lam"], assign,
                                                    g_assign)
        g_feats = g_f_attn + g_f_up + g_f_as
        ln2 = bp["ln_cluster"]
        g_t1, g_g2, g_b2 = grad.layer_norm_backward(cache["sem_in"],
                                                    ln2["gamma"],
                                                    LAYER_NORM_EPS, g_feats)
        g_bp["ln_cluster"] = {"gamma": g_g2, "beta": g_b2}
        g_bp["cluster"] = {"cores": g_cores, "lam": g_lam, "mu": g_mu,
                           **attn_grads}
        g_sem_src = _to_map(g_t1, h, w)
        g_x1 = g_x2 if parallel else g_x2 + g_sem_src
    else:
        g_x1 = g_x2

    # --- spatial sublayer ---
    g_s2 = g_x1
    g_phi = None
    g_phi_inv = None
    if cache["phi"]:
        g_img, g_coords = grad.grid_sample_backward(cache["unwarp_src"],
                                                    cache["coords_b"], g_s2)
        g_phi_inv = np.moveaxis(g_coords, -1, 0)
        g_s2 = g_img
    if shift:
        g_s2 = cyclic_shift(g_s2, (-shift, -shift))
    g_wins_out = window_partition(g_s2, win)
    attn_p = WindowAttentionParams(bp["attn"]["wq"], bp["attn"]["wk"],
                                   bp["attn"]["wv"], bp["attn"]["wo"],
                                   bp["attn"]["bias"], cfg.heads, win)
    g_wins, attn_param_grads = window_attention_backward(cache["attn"], attn_p,
                                                         g_wins_out)
    g_bp["attn"] = attn_param_grads
    g_s = window_merge(g_wins, (h, w), win)
    if shift:
        g_s = cyclic_shift(g_s, (shift, shift))
    if cache["phi"]:
        g_img, g_coords = grad.grid_sample_backward(cache["warp_src"],
                                                    cache["coords_f"], g_s)
        g_phi = np.moveaxis(g_coords, -1, 0)
        g_s = g_img
    g_tln1 = _to_tokens(g_s)
    ln1 = bp["ln_spatial"]
    g_t, g_g1, g_b1 = grad.layer_norm_backward(cache["sp_in"], ln1["gamma"],
                                               LAYER_NORM_EPS, g_tln1)
    g_bp["ln_spatial"] = {"gamma": g_g1, "beta": g_b1}
    g_x = g_x1 + _to_map(g_t, h, w)
    if cfg.use_sca and parallel:
        g_x = g_x + g_sem_src
    return g_x, g_bp, g_phi, g_phi_inv


def _soft_assign_backward(feats, lam, assign, g_assign):
    g_logits = assign * (g_assign - (g_assign * assign).sum(axis=1,
                                                            keepdims=True))
    return g_logits @ lam, g_logits.T @ feats, g_logits.sum(axis=0)


def _cluster_update_backward(feats, cores, assign, mass, g_new,
                             mode: str = "recentered"):
    """Backward of update_cores given the responsibilities.

    Returns the direct feature gradient, the core gradient, and the gradient
    w.r.t. the assignment matrix (to be chained through soft_assign).
    """
    if mode == "displacement":
        g_m = g_new
        g_mass = -(g_new * cores).sum(axis=1)
        g_cores = -mass[:, None] * g_new
    else:
        d = np.maximum(mass, UPDATE_EPS)
        u = (assign.T @ feats - mass[:, None] * cores) / d[:, None]
        g_u = g_new
        g_cores = g_new - (mass / d)[:, None] * g_u
        g_m = g_u / d[:, None]
        g_mass = (-(g_u * cores).sum(axis=1)
                  - (g_u * u).sum(axis=1) * (mass > UPDATE_EPS)) / d
    g_assign = feats @ g_m.T + g_mass[None, :]
    g_feats = assign @ g_m
    return g_feats, g_cores, g_assign


def _cluster_attention_backward(cache, wq, wk, wv, g_out):
    feats, new_cores, qh, kh, vh, attn, scale = cache
    m, d = feats.shape
    heads = attn.shape[0]
    dh = d // heads
    g_oh = g_out.reshape(m, heads, dh).transpose(1, 0, 2)
    g_attn = g_oh @ vh.transpose(0, 2, 1)
    g_vh = attn.transpose(0, 2, 1) @ g_oh
    g_logits = attn * (g_attn - (g_attn * attn).sum(axis=-1, keepdims=True))
    g_qh = g_logits @ kh * scale
    g_kh = g_logits.transpose(0, 2, 1) @ qh * scale
    g_q = g_qh.transpose(1, 0, 2).reshape(m, d)
    n = new_cores.shape[0]
    g_k = g_kh.transpose(1, 0, 2).reshape(n, d)
    g_v = g_vh.transpose(1, 0, 2).reshape(n, d)
    grads = {"wq": feats.T @ g_q, "wk": new_cores.T @ g_k,
             "wv": new_cores.T @ g_v}
    g_feats = g_q @ wq.T
    g_new_cores = g_k @ wk.T + g_v @ wv.T
    return g_feats, g_new_cores, grads
