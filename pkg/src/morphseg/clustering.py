"""Soft K-means core extraction and cross-attention from tokens to cores.

A small set of cluster cores summarizes all tokens. Assignments are a
softmax over affine scores ``lam . f + mu``; when the score parameters are
tied to the cores ("derived" construction) this is exactly the Gaussian
responsibility ``exp(-beta * ||f - core||^2)`` up to the per-token factor
that cancels in the softmax. Tokens then cross-attend to the updated cores,
which costs O(m * n_clusters) instead of O(m^2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, as_array, softmax

__all__ = [
    "ClusterState",
    "ClusterAttentionParams",
    "soft_assign",
    "update_cores",
    "cluster_attention",
]

DEFAULT_CLUSTERS = 32
UPDATE_EPS = 1e-8


@dataclass
class ClusterState:
    """Cluster cores plus the affine assignment parameters.

    ``lam`` ([n, d]) and ``mu`` ([n]) score tokens against clusters. They are
    independent learnables during training; :meth:`derived` ties them to the
    cores through the temperature ``beta`` (used for initialization and for
    the Gaussian-equivalence check).
    """

    cores: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    beta: float = 1.0

    def __post_init__(self):
        self.cores = as_array(self.cores)
        self.lam = as_array(self.lam)
        self.mu = as_array(self.mu)
        n, d = self.cores.shape
        if n < 1:
            raise ShapeError("need at least one cluster")
        if self.lam.shape != (n, d) or self.mu.shape != (n,):
            raise ShapeError(
                f"assignment params {self.lam.shape}/{self.mu.shape} do not "
                f"match cores {self.cores.shape}")
        if self.beta <= 0:
            raise ValueError(f"beta must be positive, got {self.beta}")

    @property
    def n_clusters(self) -> int:
        return self.cores.shape[0]

    @classmethod
    def derived(cls, cores, beta: float = 1.0) -> "ClusterState":
        """Tie the assignment parameters to the cores at temperature beta."""
        cores = as_array(cores)
        lam = 2.0 * beta * cores
        mu = -beta * (cores ** 2).sum(axis=1)
        return cls(cores, lam, mu, beta)

    @classmethod
    def random_init(cls, n_clusters: int, dim: int, rng,
                    beta: float = 1.0) -> "ClusterState":
        cores = rng.standard_normal((n_clusters, dim)) / np.sqrt(dim)
        return cls.derived(cores, beta)


def soft_assign(feats, cs: ClusterState) -> np.ndarray:
    """Soft cluster responsibilities, shape [m, n_clusters]; rows sum to 1."""
    feats = as_array(feats)
    if feats.ndim != 2 or feats.shape[1] != cs.lam.shape[1]:
        raise ShapeError(f"features {feats.shape} do not match "
                         f"cluster dim {cs.lam.shape[1]}")
    return softmax(feats @ cs.lam.T + cs.mu, axis=1)


def update_cores(feats, cs: ClusterState, mode: str = "recentered",
                 assign: np.ndarray | None = None) -> np.ndarray:
    """One soft K-means refinement of the cores, shape [n_clusters, d].

    mode "displacement": the raw responsibility-weighted sum of differences
    ``sum_i g_s(f_i) * (f_i - core_s)`` (a displacement, not a center).
    mode "recentered" (default): the core plus that displacement divided by
    the responsibility mass, i.e. a normalized center update that stays in
    feature space; empty clusters keep their core.
    """
    feats = as_array(feats)
    a = soft_assign(feats, cs) if assign is None else as_array(assign)
    mass = a.sum(axis=0)
    moment = a.T @ feats
    disp = moment - mass[:, None] * cs.cores
    if mode == "displacement":
        return disp
    if mode == "recentered":
        return cs.cores + disp / np.maximum(mass, UPDATE_EPS)[:, None]
    raise ValueError(f"unknown mode {mode!r}")


@dataclass
class ClusterAttentionParams:
    """Projections for multi-head cross-attention onto cluster cores."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    heads: int = 4

    def __post_init__(self):
        self.wq = as_array(self.wq)
        self.wk = as_array(self.wk)
        self.wv = as_array(self.wv)
        d = self.wq.shape[0]
        for name, w in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv)):
            if w.shape != (d, d):
                raise ShapeError(f"{name} must be [{d},{d}], got {w.shape}")
        if d % self.heads:
            raise ShapeError(f"width {d} not divisible by {self.heads} heads")

    @classmethod
    def random_init(cls, dim: int, heads: int, rng) -> "ClusterAttentionParams":
        s = 1.0 / np.sqrt(dim)
        return cls(rng.standard_normal((dim, dim)) * s,
                   rng.standard_normal((dim, dim)) * s,
                   rng.standard_normal((dim, dim)) * s, heads)


def _split_heads(t: np.ndarray, heads: int) -> np.ndarray:
    n, d = t.shape
    return t.reshape(n, heads, d // heads).transpose(1, 0, 2)


def cluster_attention(feats, new_cores, p: ClusterAttentionParams,
                      want_cache: bool = False):
    """Cross-attention from m tokens to n cluster cores, shape [m, d].

    Every intermediate is m x n or smaller; no token-token matrix is formed.
    """
    feats = as_array(feats)
    new_cores = as_array(new_cores)
    if feats.shape[1] != p.wq.shape[0] or new_cores.shape[1] != p.wk.shape[0]:
        raise ShapeError(f"feature dim mismatch: {feats.shape} / "
                         f"{new_cores.shape} vs {p.wq.shape}")
    dh = p.wq.shape[0] // p.heads
    scale = dh ** -0.5
    qh = _split_heads(feats @ p.wq, p.heads)       # [h, m, dh]
    kh = _split_heads(new_cores @ p.wk, p.heads)   # [h, n, dh]
    vh = _split_heads(new_cores @ p.wv, p.heads)
    attn = softmax(qh @ kh.transpose(0, 2, 1) * scale, axis=-1)  # [h, m, n]
    out_h = attn @ vh
    out = out_h.transpose(1, 0, 2).reshape(feats.shape[0], -1)
    if want_cache:
        return out, (feats, new_cores, qh, kh, vh, attn, scale)
    return out
