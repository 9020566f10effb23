"""The trainable segmentation network and its loss.

A small two-scale UNet-style encoder/decoder. Each encoder stage predicts a
bounded velocity field with a tiny CNN, integrates it into a diffeomorphic
deformation field (plus inverse), and runs a pair of fused transformer
blocks (unshifted + shifted windows) that warp features with the field
before window attention and warp them back afterwards. Decoding is
nearest-neighbor upsampling with skip concatenation. All parameters live in
a nested dict of float64 arrays; backward passes are hand-written and
mirror the forward caches exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import grad
from .attention import block_backward, block_forward
from .clustering import ClusterState
from .diffeo import DeformationField, VelocityField, exponentiate_trace
from .tensor import ShapeError, as_array, conv2d, gelu, softmax

__all__ = [
    "NetConfig",
    "init_params",
    "flatten_params",
    "zeros_like_params",
    "count_params",
    "predict_velocity",
    "net_forward",
    "net_backward",
    "dice_loss",
    "dice_loss_grad",
    "loss_and_grads",
    "predict",
]

VELOCITY_HIDDEN = 8
DICE_SMOOTH = 1e-5


@dataclass
class NetConfig:
    """Architecture and ablation switches.

    ``blocks_per_stage`` counts shifted pairs, so each stage runs
    ``2 * blocks_per_stage`` blocks. ``use_mp`` enables the deformation
    path, ``use_sca`` the semantic clustering sublayer; disabling either
    removes its parameters, which is how the ablations are run.
    """

    in_channels: int = 1
    base_channels: int = 16
    stages: int = 2
    blocks_per_stage: int = 1
    n_clusters: int = 32
    window: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    n_squaring: int = 7
    v_max: float = 4.0
    num_classes: int = 2
    use_mp: bool = True
    use_sca: bool = True
    fusion: str = "sequential"

    def __post_init__(self):
        if self.fusion not in ("sequential", "parallel-sum"):
            raise ValueError(f"unknown fusion mode {self.fusion!r}")
        if self.stages < 1 or self.blocks_per_stage < 1:
            raise ValueError("need at least one stage and one block pair")

    def stage_channels(self, i: int) -> int:
        return self.base_channels * (2 ** i)

    @property
    def pad_multiple(self) -> int:
        return self.window * 2 ** (self.stages - 1)

    def to_dict(self) -> dict:
        return asdict(self)


def _conv_init(rng, c_out: int, c_in: int, k: int, scale: float | None = None):
    s = scale if scale is not None else 1.0 / np.sqrt(c_in * k * k)
    return {"w": rng.standard_normal((c_out, c_in, k, k)) * s,
            "b": np.zeros(c_out)}


def _linear(rng, d_in: int, d_out: int) -> np.ndarray:
    return rng.standard_normal((d_in, d_out)) / np.sqrt(d_in)


def _ln_init(c: int) -> dict:
    return {"gamma": np.ones(c), "beta": np.zeros(c)}


def _block_init(cfg: NetConfig, c: int, rng) -> dict:
    table_rows = (2 * cfg.window - 1) ** 2
    bp = {
        "ln_spatial": _ln_init(c),
        "attn": {
            "wq": _linear(rng, c, c),
            "wk": _linear(rng, c, c),
            "wv": _linear(rng, c, c),
            "wo": _linear(rng, c, c),
            "bias": np.zeros((table_rows, cfg.heads)),
        },
    }
    if cfg.use_sca:
        state = ClusterState.random_init(cfg.n_clusters, c, rng)
        bp["ln_cluster"] = _ln_init(c)
        bp["cluster"] = {
            "cores": state.cores,
            "lam": state.lam,
            "mu": state.mu,
            "wq": _linear(rng, c, c),
            "wk": _linear(rng, c, c),
            "wv": _linear(rng, c, c),
        }
    hidden = int(round(c * cfg.mlp_ratio))
    bp["ln_mlp"] = _ln_init(c)
    bp["mlp"] = {
        "w1": _linear(rng, c, hidden),
        "b1": np.zeros(hidden),
        "w2": _linear(rng, hidden, c),
        "b2": np.zeros(c),
    }
    return bp


def init_params(cfg: NetConfig, rng) -> dict:
    """Fresh parameter tree; draw order is fixed, so a seeded generator
    yields bit-identical initializations."""
    params: dict = {"stem": _conv_init(rng, cfg.base_channels,
                                       cfg.in_channels, 3)}
    stages = []
    for i in range(cfg.stages):
        c = cfg.stage_channels(i)
        st: dict = {}
        if cfg.use_mp:
            # gentle last-layer scale: early deformations stay near identity
            st["vp"] = {
                "conv1": _conv_init(rng, VELOCITY_HIDDEN, c, 3),
                "conv2": _conv_init(rng, 2, VELOCITY_HIDDEN, 3,
                                    scale=0.1 / np.sqrt(VELOCITY_HIDDEN * 9)),
            }
        st["blocks"] = [_block_init(cfg, c, rng)
                        for _ in range(2 * cfg.blocks_per_stage)]
        if i < cfg.stages - 1:
            st["down"] = _conv_init(rng, cfg.stage_channels(i + 1), c, 3)
        stages.append(st)
    params["stages"] = stages
    params["dec"] = [
        _conv_init(rng, cfg.stage_channels(i),
                   cfg.stage_channels(i + 1) + cfg.stage_channels(i), 3)
        for i in range(cfg.stages - 1)
    ]
    params["head"] = _conv_init(rng, cfg.num_classes, cfg.base_channels, 1)
    return params


def _walk(prefix: str, node, out: dict):
    if isinstance(node, np.ndarray):
        out[prefix] = node
    elif isinstance(node, dict):
        for k, v in node.items():
            _walk(f"{prefix}.{k}" if prefix else k, v, out)
    elif isinstance(node, list):
        for i, v in enumerate(node):
            _walk(f"{prefix}.{i}", v, out)
    else:
        raise TypeError(f"unexpected node {type(node)} at {prefix!r}")


def flatten_params(params: dict) -> dict:
    """Dotted-name view of the parameter tree (arrays are shared)."""
    out: dict = {}
    _walk("", params, out)
    return out


def zeros_like_params(params):
    if isinstance(params, np.ndarray):
        return np.zeros_like(params)
    if isinstance(params, dict):
        return {k: zeros_like_params(v) for k, v in params.items()}
    return [zeros_like_params(v) for v in params]


def add_into(dst, src):
    """Accumulate one (possibly partial) gradient tree into another."""
    for k, v in src.items():
        if isinstance(v, np.ndarray):
            dst[k] += v
        elif isinstance(v, dict):
            add_into(dst[k], v)
        else:
            for i, item in enumerate(v):
                add_into(dst[k][i], item)


def count_params(params: dict) -> int:
    return sum(v.size for v in flatten_params(params).values())


# --- velocity predictor -------------------------------------------------------


def _velocity_net(x, vp: dict, v_max: float):
    z1 = conv2d(x, vp["conv1"]["w"], vp["conv1"]["b"])
    a1 = gelu(z1)
    z2 = conv2d(a1, vp["conv2"]["w"], vp["conv2"]["b"])
    voff = grad.bound_norm(z2, v_max)
    return z1, a1, z2, voff


def predict_velocity(x, vp: dict, v_max: float = 4.0) -> VelocityField:
    """Predict a norm-bounded velocity field from a feature map."""
    *_, voff = _velocity_net(as_array(x), vp, v_max)
    return VelocityField(voff, v_max)


# --- full network -------------------------------------------------------------


def net_forward(params: dict, cfg: NetConfig, image, want_cache: bool = False):
    """Forward pass; returns logits [num_classes, H, W] (and a cache tree)."""
    x = as_array(image)
    if x.ndim != 3 or x.shape[0] != cfg.in_channels:
        raise ShapeError(f"expected [{cfg.in_channels},H,W] image, "
                         f"got {x.shape}")
    h_in, w_in = x.shape[1:]
    pm = cfg.pad_multiple
    ph, pw = (-h_in) % pm, (-w_in) % pm
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, ph), (0, pw)))
    cache: dict = {"size": (h_in, w_in), "stem_in": x}

    z = conv2d(x, params["stem"]["w"], params["stem"]["b"])
    cache["stem_z"] = z
    cur = gelu(z)

    skips = []
    stage_caches = []
    for i, st in enumerate(params["stages"]):
        sc: dict = {"in": cur}
        phi = phi_inv = None
        if cfg.use_mp:
            z1, a1, z2, voff = _velocity_net(cur, st["vp"], cfg.v_max)
            trace_f = exponentiate_trace(voff, cfg.n_squaring)
            trace_b = exponentiate_trace(-voff, cfg.n_squaring)
            phi = DeformationField(trace_f[-1], cfg.n_squaring)
            phi_inv = DeformationField(trace_b[-1], cfg.n_squaring)
            sc["vp"] = (z1, a1, z2, voff, trace_f, trace_b)
            sc["fields"] = (phi, phi_inv)
        blocks = []
        for b_idx, bp in enumerate(st["blocks"]):
            shift = cfg.window // 2 if b_idx % 2 else 0
            cur, bc = block_forward(cur, bp, cfg, phi, phi_inv, shift,
                                    want_cache=True)
            blocks.append(bc)
        sc["blocks"] = blocks
        skips.append(cur)
        if i < cfg.stages - 1:
            zd = conv2d(cur, st["down"]["w"], st["down"]["b"], stride=2)
            sc["down_in"] = cur
            sc["down_z"] = zd
            cur = gelu(zd)
        stage_caches.append(sc)
    cache["stages"] = stage_caches

    d = cur
    dec_caches = []
    for i in range(cfg.stages - 2, -1, -1):
        u = grad.upsample2(d)
        cat = np.concatenate([u, skips[i]], axis=0)
        zc = conv2d(cat, params["dec"][i]["w"], params["dec"][i]["b"])
        dec_caches.append((i, cat, zc, u.shape[0]))
        d = gelu(zc)
    cache["dec"] = dec_caches
    cache["head_in"] = d

    logits_p = conv2d(d, params["head"]["w"], params["head"]["b"])
    if ph or pw:
        return_logits = logits_p[:, :h_in, :w_in]
    else:
        return_logits = logits_p
    if want_cache:
        return return_logits, cache
    return return_logits


def net_backward(params: dict, cfg: NetConfig, cache: dict, g_logits):
    """Gradients of every parameter given d(loss)/d(logits)."""
    grads = zeros_like_params(params)
    h_in, w_in = cache["size"]
    head_in = cache["head_in"]
    hp, wp = head_in.shape[1:]
    if (hp, wp) != (h_in, w_in):
        g_full = np.zeros((g_logits.shape[0], hp, wp))
        g_full[:, :h_in, :w_in] = g_logits
    else:
        g_full = g_logits

    g_d, gw, gb = grad.conv2d_backward(head_in, params["head"]["w"], g_full)
    grads["head"]["w"] += gw
    grads["head"]["b"] += gb

    g_skips = [None] * cfg.stages
    for (i, cat, zc, c_up) in reversed(cache["dec"]):
        g_zc = grad.gelu_backward(zc, g_d)
        g_cat, gw, gb = grad.conv2d_backward(cat, params["dec"][i]["w"], g_zc)
        grads["dec"][i]["w"] += gw
        grads["dec"][i]["b"] += gb
        g_skips[i] = g_cat[c_up:]
        g_d = grad.upsample2_backward(g_cat[:c_up])
    g_bottom = g_d

    g_cur = None
    for i in range(cfg.stages - 1, -1, -1):
        st = params["stages"][i]
        sc = cache["stages"][i]
        if i == cfg.stages - 1:
            g_stage_out = g_bottom
        else:
            g_zd = grad.gelu_backward(sc["down_z"], g_cur)
            g_down_in, gw, gb = grad.conv2d_backward(sc["down_in"],
                                                     st["down"]["w"], g_zd,
                                                     stride=2)
            grads["stages"][i]["down"]["w"] += gw
            grads["stages"][i]["down"]["b"] += gb
            g_stage_out = g_down_in
        if g_skips[i] is not None:
            g_stage_out = g_stage_out + g_skips[i]

        g_b = g_stage_out
        g_phi_sum = None
        g_phi_inv_sum = None
        for b_idx in range(len(st["blocks"]) - 1, -1, -1):
            g_b, g_bp, g_phi, g_phi_inv = block_backward(
                sc["blocks"][b_idx], st["blocks"][b_idx], cfg, g_b)
            add_into(grads["stages"][i]["blocks"][b_idx], g_bp)
            if g_phi is not None:
                g_phi_sum = g_phi if g_phi_sum is None else g_phi_sum + g_phi
                g_phi_inv_sum = (g_phi_inv if g_phi_inv_sum is None
                                 else g_phi_inv_sum + g_phi_inv)
        if cfg.use_mp:
            z1, a1, z2, voff, trace_f, trace_b = sc["vp"]
            g_voff = grad.exponentiate_backward(trace_f, g_phi_sum) \
                - grad.exponentiate_backward(trace_b, g_phi_inv_sum)
            g_z2 = grad.bound_norm_backward(z2, cfg.v_max, g_voff)
            g_a1, gw2, gb2 = grad.conv2d_backward(a1, st["vp"]["conv2"]["w"],
                                                  g_z2)
            grads["stages"][i]["vp"]["conv2"]["w"] += gw2
            grads["stages"][i]["vp"]["conv2"]["b"] += gb2
            g_z1 = grad.gelu_backward(z1, g_a1)
            g_vp_in, gw1, gb1 = grad.conv2d_backward(sc["in"],
                                                     st["vp"]["conv1"]["w"],
                                                     g_z1)
            grads["stages"][i]["vp"]["conv1"]["w"] += gw1
            grads["stages"][i]["vp"]["conv1"]["b"] += gb1
            g_b = g_b + g_vp_in
        g_cur = g_b

    g_z = grad.gelu_backward(cache["stem_z"], g_cur)
    _, gw, gb = grad.conv2d_backward(cache["stem_in"], params["stem"]["w"], g_z)
    grads["stem"]["w"] += gw
    grads["stem"]["b"] += gb
    return grads


# --- Dice loss ------------------------------------------------------------------


def _one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels outside [0, {num_classes})")
    t = np.zeros((num_classes,) + labels.shape)
    for k in range(num_classes):
        t[k] = labels == k
    return t


def dice_loss_grad(logits, labels, num_classes: int,
                   smooth: float = DICE_SMOOTH):
    """Soft Dice loss (mean over classes) and its logits gradient.

    loss = 1 - mean_c (2 * sum(p_c t_c) + s) / (sum p_c + sum t_c + s)
    with p the class softmax of the logits.
    """
    logits = as_array(logits)
    labels = np.asarray(labels)
    if logits.shape[0] != num_classes or logits.shape[1:] != labels.shape:
        raise ShapeError(f"logits {logits.shape} do not match labels "
                         f"{labels.shape} with {num_classes} classes")
    p = softmax(logits, axis=0)
    t = _one_hot(labels, num_classes)
    spatial = (1, 2)
    num = 2.0 * (p * t).sum(axis=spatial) + smooth
    den = p.sum(axis=spatial) + t.sum(axis=spatial) + smooth
    loss = 1.0 - float((num / den).mean())
    g_p = -(2.0 * t * den[:, None, None] - num[:, None, None]) \
        / (den ** 2)[:, None, None] / num_classes
    g_logits = p * (g_p - (p * g_p).sum(axis=0, keepdims=True))
    return loss, g_logits


def dice_loss(logits, labels, num_classes: int,
              smooth: float = DICE_SMOOTH) -> float:
    loss, _ = dice_loss_grad(logits, labels, num_classes, smooth)
    return loss


def loss_and_grads(params: dict, cfg: NetConfig, image, labels):
    """Forward + backward for one sample: (loss, grad tree, logits)."""
    logits, cache = net_forward(params, cfg, image, want_cache=True)
    loss, g_logits = dice_loss_grad(logits, labels, cfg.num_classes)
    grads = net_backward(params, cfg, cache, g_logits)
    return loss, grads, logits


def predict(params: dict, cfg: NetConfig, image) -> np.ndarray:
    """Class labels [H, W] via argmax over the logits."""
    return np.argmax(net_forward(params, cfg, image), axis=0)


def stage_fields(params: dict, cfg: NetConfig, image) -> list[DeformationField]:
    """The per-stage deformation fields the network would apply to an input
    (identity fields when the warp path is disabled)."""
    if not cfg.use_mp:
        return []
    _, cache = net_forward(params, cfg, image, want_cache=True)
    return [sc["fields"][0] for sc in cache["stages"]]
