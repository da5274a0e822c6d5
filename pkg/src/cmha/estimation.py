"""Local weighted Procrustes solves and local-to-global candidate selection."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from cmha import _kernels
from cmha.geometry import RigidTransform
from cmha.matching import CorrespondenceSet
from cmha.tensor import svd3

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EstimationConfig:
    tau_a: float = 0.05  # acceptance radius in meters
    min_pairs: int = 3
    refit: bool = True  # False keeps the raw winning candidate (strict mode)
    refit_rounds: int = 5

    def __post_init__(self):
        if self.tau_a <= 0:
            raise ValueError("tau_a must be positive")
        if self.min_pairs < 3:
            raise ValueError("min_pairs must be >= 3")
        if self.refit_rounds < 1:
            raise ValueError("refit_rounds must be >= 1")


@dataclass
class LocalCandidate:
    transform: RigidTransform
    source_patch: int
    inlier_count: int = 0


def weighted_procrustes(
    src_pts: np.ndarray,
    tgt_pts: np.ndarray,
    weights: np.ndarray | None = None,
    min_pairs: int = 3,
) -> RigidTransform:
    """Closed-form weighted rigid fit minimising sum w ||R p + t - q||^2.

    Cross-covariance SVD with the determinant sign fix, so the result is a
    proper rotation even for reflection-prone configurations.
    """
    p = np.asarray(src_pts, dtype=np.float64)
    q = np.asarray(tgt_pts, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 2 or p.shape[1] != 3:
        raise ValueError("paired (n, 3) arrays required")
    n = len(p)
    if n < min_pairs:
        raise ValueError(f"need at least {min_pairs} pairs, got {n}")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (n,) or np.any(w < 0):
        raise ValueError("weights must be nonnegative, one per pair")
    total = w.sum()
    if total <= 0:
        raise ValueError("total weight must be positive")
    wn = w / total

    p_bar = wn @ p
    q_bar = wn @ q
    p_hat = p - p_bar
    q_hat = q - q_bar
    h = (p_hat * wn[:, None]).T @ q_hat
    u, s, v = svd3(h)
    if s[0] <= 0.0 or s[1] <= 1e-9 * s[0]:
        raise ValueError("degenerate patch")
    sign = np.sign(np.linalg.det(v @ u.T))
    rotation = v @ np.diag([1.0, 1.0, sign]) @ u.T
    translation = q_bar - rotation @ p_bar
    return RigidTransform(rotation, translation)


def local_transforms(
    dense: CorrespondenceSet,
    src_points: np.ndarray,
    tgt_points: np.ndarray,
    cfg: EstimationConfig,
) -> list[LocalCandidate]:
    """One weighted Procrustes per source patch, confidences as weights.

    Patches that cannot support a rigid fit are skipped with a diagnostic;
    an empty candidate list is an error.
    """
    if dense.patch_ids is None:
        raise ValueError("dense correspondences must carry patch provenance")
    candidates: list[LocalCandidate] = []
    for patch in np.unique(dense.patch_ids):
        sel = dense.patch_ids == patch
        try:
            transform = weighted_procrustes(
                src_points[dense.src_indices[sel]],
                tgt_points[dense.tgt_indices[sel]],
                dense.confidences[sel],
                min_pairs=cfg.min_pairs,
            )
        except ValueError as exc:
            logger.info("patch %d skipped: %s", int(patch), exc)
            continue
        candidates.append(LocalCandidate(transform, int(patch)))
    if not candidates:
        raise ValueError("no local candidates")
    return candidates


def count_inliers(
    transform: RigidTransform,
    corrs: CorrespondenceSet,
    src_points: np.ndarray,
    tgt_points: np.ndarray,
    tau_a: float,
) -> int:
    counts = _kernels.count_inliers_batch(
        transform.rotation[None],
        transform.translation[None],
        src_points[corrs.src_indices],
        tgt_points[corrs.tgt_indices],
        tau_a,
    )
    return int(counts[0])


def lgr_select(
    candidates: list[LocalCandidate],
    all_corrs: CorrespondenceSet,
    src_points: np.ndarray,
    tgt_points: np.ndarray,
    cfg: EstimationConfig,
) -> RigidTransform:
    """Pick the candidate with the most inliers over the whole set.

    The residual threshold is compared as a distance (||.|| < tau_a).  When
    cfg.refit is set, the winner is re-fit on its own inlier set for up to
    cfg.refit_rounds rounds (each round widens the usable inlier set); the
    best-scoring iterate is returned, so the result never scores below any
    input candidate.
    """
    if not candidates:
        raise ValueError("at least one candidate required")
    p = src_points[all_corrs.src_indices]
    q = tgt_points[all_corrs.tgt_indices]
    counts = _kernels.count_inliers_batch(
        np.stack([c.transform.rotation for c in candidates]),
        np.stack([c.transform.translation for c in candidates]),
        p,
        q,
        cfg.tau_a,
    )
    for cand, count in zip(candidates, counts.tolist()):
        cand.inlier_count = int(count)
    best = int(np.argmax(counts))  # first maximum wins ties
    winner = candidates[best]
    if not cfg.refit:
        return winner.transform

    best_transform = winner.transform
    best_count = winner.inlier_count
    current = winner.transform
    for _ in range(cfg.refit_rounds):
        residual = np.linalg.norm(current.apply(p) - q, axis=1)
        mask = residual < cfg.tau_a
        if mask.sum() < cfg.min_pairs:
            break
        try:
            current = weighted_procrustes(
                p[mask], q[mask], all_corrs.confidences[mask], cfg.min_pairs
            )
        except ValueError:
            break
        count = count_inliers(current, all_corrs, src_points, tgt_points, cfg.tau_a)
        if count >= best_count:
            best_transform = current
            best_count = count
    return best_transform


def save_transform(path, transform: RigidTransform) -> None:
    payload = {
        "rotation": transform.rotation.reshape(-1).tolist(),
        "translation": transform.translation.tolist(),
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_transform(path) -> RigidTransform:
    payload = json.loads(Path(path).read_text())
    rotation = np.array(payload["rotation"], dtype=np.float64).reshape(3, 3)
    translation = np.array(payload["translation"], dtype=np.float64)
    return RigidTransform(rotation, translation)
