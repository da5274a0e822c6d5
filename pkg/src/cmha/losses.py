"""Training losses: overlap-aware circle loss, per-patch fine matching loss,
and the cross-modal contrastive term, each as forward value plus analytic
gradient with respect to its natural input (feature distances, assignment
probabilities, similarity entries).  No optimizer lives here; gradients exist
to be finite-difference verified."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CircleLossConfig:
    delta_p: float = 0.1
    delta_n: float = 1.4
    gamma: float = 10.0
    positive_overlap_min: float = 0.10

    def __post_init__(self):
        if not 0 < self.delta_p < self.delta_n:
            raise ValueError("margins must satisfy 0 < delta_p < delta_n")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")


def _logsumexp_masked(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise logsumexp over masked entries; -inf rows mean an empty mask."""
    masked = np.where(mask, values, -np.inf)
    peak = masked.max(axis=1)
    safe_peak = np.where(np.isneginf(peak), 0.0, peak)
    with np.errstate(invalid="ignore"):
        e = np.where(mask, np.exp(masked - safe_peak[:, None]), 0.0)
    total = e.sum(axis=1)
    return np.where(total > 0, np.log(np.maximum(total, 1e-300)) + safe_peak, -np.inf)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _circle_one_direction(dist, overlaps, cfg):
    """Anchors are rows; positives by overlap > threshold, negatives at 0."""
    pos = overlaps > cfg.positive_overlap_min
    neg = overlaps == 0.0
    anchors = pos.any(axis=1)
    if not anchors.any():
        raise ValueError("empty anchor set")

    lam = np.sqrt(np.where(pos, overlaps, 0.0))
    pos_hinge = np.maximum(dist - cfg.delta_p, 0.0)
    neg_hinge = np.maximum(cfg.delta_n - dist, 0.0)
    a = lam * cfg.gamma * pos_hinge**2
    b = cfg.gamma * neg_hinge**2

    lp = _logsumexp_masked(a, pos)
    ln = _logsumexp_masked(b, neg)
    s = lp + ln  # -inf when an anchor has no negatives: that anchor adds 0
    active = anchors & ~np.isneginf(s)

    n_anchors = int(anchors.sum())
    value = float(_softplus(s[active]).sum()) / n_anchors

    grad = np.zeros_like(dist)
    if active.any():
        sig = np.zeros(dist.shape[0])
        sig[active] = 1.0 / (1.0 + np.exp(-s[active]))
        # inactive rows may overflow in the throwaway exp; they are zeroed next
        with np.errstate(invalid="ignore", over="ignore"):
            soft_pos = np.where(pos, np.exp(a - np.where(active, lp, 0.0)[:, None]), 0.0)
            soft_neg = np.where(neg, np.exp(b - np.where(active, ln, 0.0)[:, None]), 0.0)
        soft_pos[~active] = 0.0
        soft_neg[~active] = 0.0
        grad += sig[:, None] * soft_pos * (lam * cfg.gamma * 2.0 * pos_hinge)
        grad -= sig[:, None] * soft_neg * (cfg.gamma * 2.0 * neg_hinge)
        grad /= n_anchors
    return value, grad


def circle_loss_from_distances(
    dist: np.ndarray, overlaps: np.ndarray, cfg: CircleLossConfig
) -> tuple[float, np.ndarray]:
    """Bidirectional overlap-aware circle loss on a feature-distance matrix.

    Returns the averaged source/target-anchored loss and its gradient with
    respect to each pairwise distance.
    """
    dist = np.asarray(dist, dtype=np.float64)
    overlaps = np.asarray(overlaps, dtype=np.float64)
    if dist.shape != overlaps.shape:
        raise ValueError("distance and overlap tables must align")
    if np.any(overlaps < 0) or np.any(overlaps > 1):
        raise ValueError("overlaps must lie in [0, 1]")
    loss_p, grad_p = _circle_one_direction(dist, overlaps, cfg)
    loss_q, grad_q = _circle_one_direction(dist.T, overlaps.T, cfg)
    return 0.5 * (loss_p + loss_q), 0.5 * (grad_p + grad_q.T)


def coarse_circle_loss(
    src_feats: np.ndarray,
    tgt_feats: np.ndarray,
    overlaps: np.ndarray,
    cfg: CircleLossConfig,
) -> tuple[float, np.ndarray]:
    """Circle loss on L2 feature distances between superpoint descriptors."""
    src = np.asarray(src_feats, dtype=np.float64)
    tgt = np.asarray(tgt_feats, dtype=np.float64)
    if src.shape[1] != tgt.shape[1]:
        raise ValueError("feature dims differ")
    dist = np.linalg.norm(src[:, None, :] - tgt[None, :, :], axis=2)
    return circle_loss_from_distances(dist, overlaps, cfg)


def fine_matching_loss(
    z_list: list[np.ndarray],
    matched: list[np.ndarray],
    unmatched_src: list[np.ndarray],
    unmatched_tgt: list[np.ndarray],
    normalization: str = "patch_count",
) -> tuple[float, list[np.ndarray]]:
    """Negative log-likelihood of supervised assignment entries per patch.

    ``matched[i]`` holds (k, 2) source/target index pairs inside patch i;
    unmatched points are supervised onto the dustbin column/row.  The sum is
    normalised by the patch count (or by the total dense point count with
    ``normalization="total_points"``).
    """
    g = len(z_list)
    if not (len(matched) == len(unmatched_src) == len(unmatched_tgt) == g):
        raise ValueError("per-patch supervision lists must align")
    if g == 0:
        raise ValueError("at least one patch required")
    if normalization == "patch_count":
        denom = float(g)
    elif normalization == "total_points":
        denom = float(sum((z.shape[0] - 1) + (z.shape[1] - 1) for z in z_list))
    else:
        raise ValueError(f"unknown normalization {normalization!r}")

    value = 0.0
    grads = []
    for idx, z in enumerate(z_list):
        z = np.asarray(z, dtype=np.float64)
        rows, cols = z.shape
        grad = np.zeros_like(z)
        pairs = np.asarray(matched[idx], dtype=np.int64).reshape(-1, 2)
        sup_rows = np.concatenate(
            [pairs[:, 0], np.asarray(unmatched_src[idx], dtype=np.int64),
             np.full(len(unmatched_tgt[idx]), rows - 1, dtype=np.int64)]
        )
        sup_cols = np.concatenate(
            [pairs[:, 1], np.full(len(unmatched_src[idx]), cols - 1, dtype=np.int64),
             np.asarray(unmatched_tgt[idx], dtype=np.int64)]
        )
        if len(sup_rows) and (
            sup_rows.max() >= rows or sup_cols.max() >= cols
            or sup_rows.min() < 0 or sup_cols.min() < 0
        ):
            raise ValueError(f"supervised index out of range in patch {idx}")
        probs = z[sup_rows, sup_cols]
        if np.any(probs == 0.0):
            raise ValueError("zero probability at supervised entry")
        value -= float(np.log(probs).sum())
        np.subtract.at(grad, (sup_rows, sup_cols), 1.0 / probs)
        grads.append(grad / denom)
    return value / denom, grads


def contrastive_from_similarity(s: np.ndarray) -> tuple[float, np.ndarray]:
    """InfoNCE over a square similarity matrix whose diagonal is positive."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError("similarity matrix must be square")
    n = s.shape[0]
    if n == 0:
        raise ValueError("at least one row required")
    peak = s.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(s - peak).sum(axis=1)) + peak[:, 0]
    value = float(np.mean(log_z - np.diag(s)))
    grad = np.exp(s - log_z[:, None])
    grad[np.diag_indices(n)] -= 1.0
    return value, grad / n


def cross_modal_contrastive(
    geo_feats: np.ndarray, img_feats: np.ndarray
) -> tuple[float, np.ndarray]:
    """Contrastive loss aligning geometric rows with image rows pointwise."""
    geo = np.asarray(geo_feats, dtype=np.float64)
    img = np.asarray(img_feats, dtype=np.float64)
    if geo.shape != img.shape:
        raise ValueError("feature matrices must share shape")
    s = geo @ img.T / np.sqrt(geo.shape[1])
    return contrastive_from_similarity(s)


@dataclass
class LossReport:
    l_c: float
    l_f: float
    l_cmc: float
    lambda_weight: float
    total: float

    def to_dict(self) -> dict:
        return {
            "l_c": self.l_c,
            "l_f": self.l_f,
            "l_cmc": self.l_cmc,
            "lambda": self.lambda_weight,
            "total": self.total,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def total_loss(
    l_c: float, l_f: float, l_cmc: float, lambda_weight: float = 0.5
) -> LossReport:
    for name, value in (("l_c", l_c), ("l_f", l_f), ("l_cmc", l_cmc)):
        if not np.isfinite(value):
            raise ValueError(f"{name} must be finite")
    return LossReport(l_c, l_f, l_cmc, lambda_weight, l_c + l_f + lambda_weight * l_cmc)
