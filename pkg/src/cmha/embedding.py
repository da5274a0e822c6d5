"""Pairwise geometric embeddings and absolute positional encodings.

The pair embedding combines a sinusoidal distance encoding (through a small
learnable map) with triplet-angle channels reduced by a max over anchors.
Distances and angles are rigid invariants, so the pair embedding is too.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from cmha import _kernels
from cmha.rng import Xorshift64Star, derive_seed
from cmha.tensor import uniform_matrix

_FREQ_BASE = 10000.0


@dataclass(frozen=True)
class EmbeddingConfig:
    d: int = 24
    sigma_d: float = 0.2
    sigma_alpha: float = math.radians(15.0)
    k_anchors: int = 3

    def __post_init__(self):
        if self.d < 2 or self.d % 2:
            raise ValueError("embedding dimension must be even and >= 2")
        if self.sigma_d <= 0 or self.sigma_alpha <= 0:
            raise ValueError("sigma_d and sigma_alpha must be positive")
        if self.k_anchors < 1:
            raise ValueError("k_anchors must be >= 1")


@dataclass(frozen=True)
class EmbeddingWeights:
    """Distance-map MLP plus the distance/angle output projections."""

    mlp_w1: np.ndarray
    mlp_b1: np.ndarray
    mlp_w2: np.ndarray
    mlp_b2: np.ndarray
    w_dist: np.ndarray  # (d, d)
    w_angle: np.ndarray  # (d,): scales the scalar angle channel per output dim
    seed: int


def init_embedding_weights(cfg: EmbeddingConfig, seed: int) -> EmbeddingWeights:
    rng = Xorshift64Star(seed)
    d = cfg.d
    bound = 1.0 / math.sqrt(d)
    mlp_w1 = uniform_matrix(rng, d, d, bound)
    mlp_b1 = uniform_matrix(rng, 1, d, bound)[0]
    mlp_w2 = uniform_matrix(rng, d, d, bound)
    mlp_b2 = uniform_matrix(rng, 1, d, bound)[0]
    w_dist = uniform_matrix(rng, d, d, bound)
    w_angle = uniform_matrix(rng, 1, d, bound)[0]
    return EmbeddingWeights(mlp_w1, mlp_b1, mlp_w2, mlp_b2, w_dist, w_angle, seed)


def sinusoid_channels(values: np.ndarray, d: int) -> np.ndarray:
    """Interleaved sin/cos encoding over d channels of arbitrary-shape input.

    Channel 2m holds sin(v / 10000^(2m/d)), channel 2m+1 the matching cos.
    """
    values = np.asarray(values, dtype=np.float64)
    m = np.arange(d // 2)
    scale = _FREQ_BASE ** (2.0 * m / d)
    arg = values[..., None] / scale
    out = np.empty(values.shape + (d,), dtype=np.float64)
    out[..., 0::2] = np.sin(arg)
    out[..., 1::2] = np.cos(arg)
    return out


def distance_sinusoid(coords: np.ndarray, cfg: EmbeddingConfig) -> np.ndarray:
    """Raw (n, n, d) sinusoid of pairwise distances, before the learnable map."""
    pts = np.asarray(coords, dtype=np.float64)
    dist = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2)
    return sinusoid_channels(dist / cfg.sigma_d, cfg.d)


def distance_embedding(
    coords: np.ndarray, cfg: EmbeddingConfig, weights: EmbeddingWeights
) -> np.ndarray:
    """Distance sinusoid passed through the one-hidden-layer map."""
    raw = distance_sinusoid(coords, cfg)
    hidden = np.maximum(raw @ weights.mlp_w1 + weights.mlp_b1, 0.0)
    return hidden @ weights.mlp_w2 + weights.mlp_b2


def neighbor_order(coords: np.ndarray) -> np.ndarray:
    """(n, n-1) indices of every other point sorted by distance, ties by index."""
    pts = np.asarray(coords, dtype=np.float64)
    n = len(pts)
    dist = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2)
    np.fill_diagonal(dist, np.inf)
    return np.argsort(dist, axis=1, kind="stable")[:, : n - 1].astype(np.int64)


def angle_embedding(coords: np.ndarray, cfg: EmbeddingConfig) -> np.ndarray:
    """(n, n, k_anchors) values sin(angle / sigma_alpha).

    The anchor set for pair (i, j) is the k nearest neighbors of i excluding
    i and j; degenerate zero-length vectors contribute angle 0.
    """
    pts = np.asarray(coords, dtype=np.float64)
    n = len(pts)
    if n - 2 < cfg.k_anchors:
        raise ValueError(
            f"need at least {cfg.k_anchors + 2} points for {cfg.k_anchors} anchors"
        )
    angles = _kernels.triplet_angles(pts, neighbor_order(pts), cfg.k_anchors)
    return np.sin(angles / cfg.sigma_alpha)


def pair_geometric_embedding(
    coords: np.ndarray, cfg: EmbeddingConfig, weights: EmbeddingWeights
) -> np.ndarray:
    """(n, n, d) rigid-invariant pair embedding: projected distance channels
    plus the anchor-wise max of projected angle channels."""
    e_dist = distance_embedding(coords, cfg, weights) @ weights.w_dist
    angles = angle_embedding(coords, cfg)  # (n, n, k)
    e_angle = (angles[..., None] * weights.w_angle).max(axis=2)
    return e_dist + e_angle


@dataclass(frozen=True)
class _AxisLayout:
    axes: int
    per_axis: int


def _axis_layout(cfg: EmbeddingConfig, axes: int) -> _AxisLayout:
    if cfg.d % (2 * axes):
        raise ValueError(
            f"embedding dimension {cfg.d} not divisible by {2 * axes} "
            f"for {axes}-axis positions"
        )
    return _AxisLayout(axes, cfg.d // axes)


def absolute_position_embedding(positions: np.ndarray, cfg: EmbeddingConfig) -> np.ndarray:
    """(n, d) sinusoidal encoding of 2-D or 3-D positions, axis-major channels."""
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[1] not in (2, 3):
        raise ValueError("positions must be (n, 2) or (n, 3)")
    if not np.all(np.isfinite(pos)):
        raise ValueError("positions must be finite")
    layout = _axis_layout(cfg, pos.shape[1])
    blocks = [
        sinusoid_channels(pos[:, a] / cfg.sigma_d, layout.per_axis)
        for a in range(layout.axes)
    ]
    return np.concatenate(blocks, axis=1)


def derive_embedding_seed(seed: int) -> int:
    """Stream seed reserved for embedding weights inside a stack seed."""
    return derive_seed(seed, 0xE0)
