"""Self, aggregation, and cross attention plus the alternating hybrid stack.

All three passes are single-head, residual, and purely functional given their
layer weights.  One stack iteration runs self-attention on each cloud, fuses
each cloud with its own image patches, then exchanges context between the
clouds through cross-attention.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from cmha.embedding import (
    EmbeddingConfig,
    EmbeddingWeights,
    absolute_position_embedding,
    derive_embedding_seed,
    init_embedding_weights,
    pair_geometric_embedding,
)
from cmha.geometry import SuperpointSet
from cmha.rng import derive_seed
from cmha.tensor import ProjectionSet, init_projections, softmax_rows

KINDS = ("self", "aggregation", "cross")


@dataclass(frozen=True)
class AttentionLayer:
    proj: ProjectionSet
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attention kind {self.kind!r}")

    @property
    def d_k(self) -> int:
        return self.proj.d


@dataclass(frozen=True)
class HybridStackConfig:
    n_iters: int = 3
    d: int = 24
    embedding: EmbeddingConfig = EmbeddingConfig()

    def __post_init__(self):
        if self.n_iters < 1:
            raise ValueError("n_iters must be >= 1")
        if self.d != self.embedding.d:
            raise ValueError("stack dimension must match embedding dimension")


def _check_dim(feats: np.ndarray, d: int, name: str) -> np.ndarray:
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != d:
        raise ValueError(f"{name} must be (n, {d}), got {feats.shape}")
    return feats


def self_attention_scores(
    feats: np.ndarray, pair_emb: np.ndarray, layer: AttentionLayer
) -> np.ndarray:
    """Score matrix e with geometry-aware keys, before the softmax."""
    d = layer.d_k
    feats = _check_dim(feats, d, "feats")
    n = feats.shape[0]
    pair_emb = np.asarray(pair_emb, dtype=np.float64)
    if pair_emb.shape != (n, n, d):
        raise ValueError(f"pair embedding must be ({n}, {n}, {d})")
    q = feats @ layer.proj.w_q
    keys = feats @ layer.proj.w_k + pair_emb @ layer.proj.w_g  # (n, n, d) keys per pair
    return np.einsum("id,ijd->ij", q, keys) / np.sqrt(d)


def self_attention(
    feats: np.ndarray, pair_emb: np.ndarray, layer: AttentionLayer
) -> np.ndarray:
    scores = self_attention_scores(feats, pair_emb, layer)
    weights = softmax_rows(scores)
    return weights @ (feats @ layer.proj.w_v) + feats


def aggregation_attention(
    point_feats: np.ndarray,
    image_feats: np.ndarray,
    point_pos_emb: np.ndarray,
    image_pos_emb: np.ndarray,
    layer: AttentionLayer,
) -> np.ndarray:
    """Points query image patches; patch values fold back residually."""
    d = layer.d_k
    point_feats = _check_dim(point_feats, d, "point_feats")
    image_feats = _check_dim(image_feats, d, "image_feats")
    if image_feats.shape[0] == 0:
        raise ValueError("no image patches")
    point_pos_emb = _check_dim(point_pos_emb, d, "point_pos_emb")
    image_pos_emb = _check_dim(image_pos_emb, d, "image_pos_emb")
    q = point_feats @ layer.proj.w_q + point_pos_emb @ layer.proj.w_g
    k = image_feats @ layer.proj.w_k + image_pos_emb @ layer.proj.w_f
    weights = softmax_rows(q @ k.T / np.sqrt(d))
    return weights @ (image_feats @ layer.proj.w_v) + point_feats


def cross_attention(
    src_feats: np.ndarray,
    tgt_feats: np.ndarray,
    src_pos: np.ndarray,
    tgt_pos: np.ndarray,
    layer: AttentionLayer,
) -> np.ndarray:
    """Source queries target; both embeddings share the same projection."""
    d = layer.d_k
    src_feats = _check_dim(src_feats, d, "src_feats")
    tgt_feats = _check_dim(tgt_feats, d, "tgt_feats")
    if tgt_feats.shape[0] == 0:
        raise ValueError("empty target")
    src_pos = _check_dim(src_pos, d, "src_pos")
    tgt_pos = _check_dim(tgt_pos, d, "tgt_pos")
    q = src_feats @ layer.proj.w_q + src_pos @ layer.proj.w_g
    k = tgt_feats @ layer.proj.w_k + tgt_pos @ layer.proj.w_g
    weights = softmax_rows(q @ k.T / np.sqrt(d))
    return weights @ (tgt_feats @ layer.proj.w_v) + src_feats


@dataclass(frozen=True)
class StackIteration:
    self_layer: AttentionLayer
    agg_layer: AttentionLayer
    cross_layer: AttentionLayer


class HybridStack:
    """N alternating iterations of self / aggregation / cross attention.

    Weights are derived deterministically from the stack seed; iteration i's
    layers do not depend on n_iters, so a shorter stack is a prefix of a
    longer one.
    """

    def __init__(self, cfg: HybridStackConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        self.emb_weights = init_embedding_weights(
            cfg.embedding, derive_embedding_seed(seed)
        )
        self.iterations = [
            StackIteration(
                AttentionLayer(init_projections(cfg.d, derive_seed(seed, 3 * i + 1)), "self"),
                AttentionLayer(
                    init_projections(cfg.d, derive_seed(seed, 3 * i + 2)), "aggregation"
                ),
                AttentionLayer(
                    init_projections(cfg.d, derive_seed(seed, 3 * i + 3)), "cross"
                ),
            )
            for i in range(cfg.n_iters)
        ]

    def run_iteration(
        self,
        iteration: StackIteration,
        feats_p: np.ndarray,
        feats_q: np.ndarray,
        ctx: dict,
    ) -> tuple[np.ndarray, np.ndarray]:
        feats_p = self_attention(feats_p, ctx["pair_p"], iteration.self_layer)
        feats_q = self_attention(feats_q, ctx["pair_q"], iteration.self_layer)
        feats_p = aggregation_attention(
            feats_p, ctx["img_p"], ctx["pos_p"], ctx["pix_p"], iteration.agg_layer
        )
        feats_q = aggregation_attention(
            feats_q, ctx["img_q"], ctx["pos_q"], ctx["pix_q"], iteration.agg_layer
        )
        new_p = cross_attention(
            feats_p, feats_q, ctx["pos_p"], ctx["pos_q"], iteration.cross_layer
        )
        new_q = cross_attention(
            feats_q, feats_p, ctx["pos_q"], ctx["pos_p"], iteration.cross_layer
        )
        return new_p, new_q

    def build_context(
        self,
        src: SuperpointSet,
        tgt: SuperpointSet,
        src_img_feats: np.ndarray,
        src_img_pix: np.ndarray,
        tgt_img_feats: np.ndarray,
        tgt_img_pix: np.ndarray,
    ) -> dict:
        """Embeddings depend only on coordinates, so they are computed once."""
        ecfg = self.cfg.embedding
        return {
            "pair_p": pair_geometric_embedding(src.coords, ecfg, self.emb_weights),
            "pair_q": pair_geometric_embedding(tgt.coords, ecfg, self.emb_weights),
            "pos_p": absolute_position_embedding(src.coords, ecfg),
            "pos_q": absolute_position_embedding(tgt.coords, ecfg),
            "pix_p": absolute_position_embedding(src_img_pix, ecfg),
            "pix_q": absolute_position_embedding(tgt_img_pix, ecfg),
            "img_p": _check_dim(src_img_feats, self.cfg.d, "src image features"),
            "img_q": _check_dim(tgt_img_feats, self.cfg.d, "tgt image features"),
        }

    def forward(
        self,
        src: SuperpointSet,
        tgt: SuperpointSet,
        src_img_feats: np.ndarray,
        src_img_pix: np.ndarray,
        tgt_img_feats: np.ndarray,
        tgt_img_pix: np.ndarray,
    ) -> tuple[np.ndarray, np.ndarray]:
        ctx = self.build_context(
            src, tgt, src_img_feats, src_img_pix, tgt_img_feats, tgt_img_pix
        )
        feats_p = _check_dim(src.features, self.cfg.d, "src features")
        feats_q = _check_dim(tgt.features, self.cfg.d, "tgt features")
        for iteration in self.iterations:
            feats_p, feats_q = self.run_iteration(iteration, feats_p, feats_q, ctx)
        return feats_p, feats_q

    # -- weight snapshots --------------------------------------------------

    def to_dict(self) -> dict:
        def mat(a):
            return np.asarray(a).tolist()

        ew = self.emb_weights
        return {
            "d": self.cfg.d,
            "n_iters": self.cfg.n_iters,
            "seed": self.seed,
            "embedding_weights": {
                "mlp_w1": mat(ew.mlp_w1),
                "mlp_b1": mat(ew.mlp_b1),
                "mlp_w2": mat(ew.mlp_w2),
                "mlp_b2": mat(ew.mlp_b2),
                "w_dist": mat(ew.w_dist),
                "w_angle": mat(ew.w_angle),
            },
            "iterations": [
                {
                    layer.kind: {
                        "w_q": mat(layer.proj.w_q),
                        "w_k": mat(layer.proj.w_k),
                        "w_v": mat(layer.proj.w_v),
                        "w_g": mat(layer.proj.w_g),
                        "w_f": mat(layer.proj.w_f),
                    }
                    for layer in (it.self_layer, it.agg_layer, it.cross_layer)
                }
                for it in self.iterations
            ],
        }

    def save(self, path, embedding: EmbeddingConfig | None = None) -> None:
        payload = self.to_dict()
        emb = embedding or self.cfg.embedding
        payload["embedding_config"] = {
            "sigma_d": emb.sigma_d,
            "sigma_alpha": emb.sigma_alpha,
            "k_anchors": emb.k_anchors,
        }
        Path(path).write_text(json.dumps(payload))

    @classmethod
    def load(cls, path) -> "HybridStack":
        payload = json.loads(Path(path).read_text())
        ecfg_raw = payload.get("embedding_config", {})
        ecfg = EmbeddingConfig(d=payload["d"], **ecfg_raw)
        cfg = HybridStackConfig(payload["n_iters"], payload["d"], ecfg)
        stack = cls.__new__(cls)
        stack.cfg = cfg
        stack.seed = payload["seed"]
        ew = payload["embedding_weights"]
        stack.emb_weights = EmbeddingWeights(
            np.array(ew["mlp_w1"]),
            np.array(ew["mlp_b1"]),
            np.array(ew["mlp_w2"]),
            np.array(ew["mlp_b2"]),
            np.array(ew["w_dist"]),
            np.array(ew["w_angle"]),
            payload["seed"],
        )
        stack.iterations = []
        for entry in payload["iterations"]:
            layers = {}
            for kind in KINDS:
                w = entry[kind]
                proj = ProjectionSet(
                    np.array(w["w_q"]),
                    np.array(w["w_k"]),
                    np.array(w["w_v"]),
                    np.array(w["w_g"]),
                    np.array(w["w_f"]),
                    payload["seed"],
                )
                layers[kind] = AttentionLayer(proj, kind)
            stack.iterations.append(
                StackIteration(layers["self"], layers["aggregation"], layers["cross"])
            )
        return stack


def hybrid_stack(
    src: SuperpointSet,
    tgt: SuperpointSet,
    src_img_feats: np.ndarray,
    src_img_pix: np.ndarray,
    tgt_img_feats: np.ndarray,
    tgt_img_pix: np.ndarray,
    cfg: HybridStackConfig,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Convenience wrapper building a stack from a seed and running it."""
    stack = HybridStack(cfg, seed)
    return stack.forward(
        src, tgt, src_img_feats, src_img_pix, tgt_img_feats, tgt_img_pix
    )
