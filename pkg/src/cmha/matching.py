"""Similarity scoring, dustbin Sinkhorn normalisation, and coarse-to-fine
correspondence extraction."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from cmha import _kernels
from cmha.geometry import SuperpointSet

logger = logging.getLogger(__name__)


def feature_similarity(
    src: np.ndarray, tgt: np.ndarray, dedup_mask=None
) -> np.ndarray:
    """Scaled dot-product similarity; masked pairs are set to -inf."""
    src = np.asarray(src, dtype=np.float64)
    tgt = np.asarray(tgt, dtype=np.float64)
    if src.ndim != 2 or tgt.ndim != 2 or src.shape[1] != tgt.shape[1]:
        raise ValueError(f"feature dims differ: {src.shape} vs {tgt.shape}")
    scores = src @ tgt.T / np.sqrt(src.shape[1])
    if dedup_mask is not None:
        for m, n in dedup_mask:
            scores[m, n] = -np.inf
    return scores


def dustbin_augment(scores: np.ndarray, z: float) -> np.ndarray:
    """Border the score matrix with the dustbin logit z on all new entries."""
    scores = np.asarray(scores, dtype=np.float64)
    n, m = scores.shape
    out = np.full((n + 1, m + 1), float(z))
    out[:n, :m] = scores
    return out


@dataclass
class AssignmentMatrix:
    """Sinkhorn-normalised dustbin-augmented assignment probabilities."""

    z: np.ndarray
    dustbin_logit: float
    row_residual: float
    col_residual: float

    @property
    def interior(self) -> np.ndarray:
        return self.z[:-1, :-1]


def sinkhorn(
    augmented_scores: np.ndarray, l_iters: int, dustbin_logit: float = 0.0
) -> AssignmentMatrix:
    """Exponentiate (max-subtracted) scores and balance them for L iterations.

    Non-dustbin rows and columns are driven toward unit sums; the dustbin row
    and column are exempt from that constraint and absorb the complementary
    mass (marginals m and n), so unmatched points have somewhere to go.  The
    dustbin corner therefore holds the unmatched-unmatched mass and is the
    one entry that may exceed 1; every match-relevant entry stays in [0, 1].
    Residuals are reported, not asserted, so pathological configurations stay
    inspectable.
    """
    s = np.asarray(augmented_scores, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] < 2 or s.shape[1] < 2:
        raise ValueError("augmented scores must be at least 2x2")
    if l_iters < 1:
        raise ValueError("l_iters must be >= 1")
    if np.any(np.isnan(s)) or np.any(s == np.inf):
        raise ValueError("scores must be finite or -inf")
    if np.any(np.isneginf(s).all(axis=1)[:-1]) or np.any(np.isneginf(s).all(axis=0)[:-1]):
        raise ValueError("fully masked row or column")
    kernel = np.exp(s - s.max())
    z, row_res, col_res = _kernels.sinkhorn_core(kernel, l_iters)
    return AssignmentMatrix(z, float(dustbin_logit), row_res, col_res)


@dataclass
class CorrespondenceSet:
    """Scored index pairs, held in confidence-descending order."""

    src_indices: np.ndarray
    tgt_indices: np.ndarray
    confidences: np.ndarray
    level: str = "coarse"
    patch_ids: np.ndarray | None = None

    def __post_init__(self):
        self.src_indices = np.asarray(self.src_indices, dtype=np.int64)
        self.tgt_indices = np.asarray(self.tgt_indices, dtype=np.int64)
        self.confidences = np.asarray(self.confidences, dtype=np.float64)
        if not (
            len(self.src_indices) == len(self.tgt_indices) == len(self.confidences)
        ):
            raise ValueError("index and confidence arrays must align")
        if self.patch_ids is not None:
            self.patch_ids = np.asarray(self.patch_ids, dtype=np.int64)
            if len(self.patch_ids) != len(self.src_indices):
                raise ValueError("patch ids must align with pairs")
        if len(self.confidences) > 1 and np.any(np.diff(self.confidences) > 0):
            raise ValueError("confidences must be nonincreasing")
        keys = set(zip(self.src_indices.tolist(), self.tgt_indices.tolist()))
        if len(keys) != len(self.src_indices):
            raise ValueError("duplicate (src, tgt) pair")

    def __len__(self) -> int:
        return len(self.src_indices)

    @property
    def pairs(self) -> list[tuple[int, int, float]]:
        return list(
            zip(
                self.src_indices.tolist(),
                self.tgt_indices.tolist(),
                self.confidences.tolist(),
            )
        )

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["src_index", "tgt_index", "confidence"])
            for s, t, c in self.pairs:
                writer.writerow([s, t, f"{c:.9g}"])

    @classmethod
    def from_csv(cls, path, level: str = "coarse") -> "CorrespondenceSet":
        rows = list(csv.reader(Path(path).open()))
        if not rows or rows[0] != ["src_index", "tgt_index", "confidence"]:
            raise ValueError(f"cannot read {path}: bad correspondence header")
        data = rows[1:]
        return cls(
            np.array([int(r[0]) for r in data], dtype=np.int64),
            np.array([int(r[1]) for r in data], dtype=np.int64),
            np.array([float(r[2]) for r in data]),
            level=level,
        )


def _ordered_topk(values: np.ndarray, rows: np.ndarray, cols: np.ndarray, k: int):
    """Top-k by value descending, ties broken by (row, col) lexicographically."""
    order = np.lexsort((cols, rows, -values))
    take = order[: min(k, len(values))]
    return rows[take], cols[take], values[take]


def _exclusive_topk(interior: np.ndarray, k: int):
    """Greedy one-to-one top-k: each row and column is used at most once.

    Selection order is confidence descending with (row, col) tie-break, so a
    point never appears in two pairs of the same patch.
    """
    n, m = interior.shape
    rows, cols = np.divmod(np.arange(n * m), m)
    values = interior.ravel()
    order = np.lexsort((cols, rows, -values))
    used_rows = np.zeros(n, dtype=bool)
    used_cols = np.zeros(m, dtype=bool)
    picked_r, picked_c, picked_v = [], [], []
    for flat in order:
        r, c = rows[flat], cols[flat]
        if used_rows[r] or used_cols[c]:
            continue
        used_rows[r] = True
        used_cols[c] = True
        picked_r.append(int(r))
        picked_c.append(int(c))
        picked_v.append(float(values[flat]))
        if len(picked_r) == k:
            break
    return picked_r, picked_c, picked_v


def topk_select(assignment: AssignmentMatrix, k: int) -> CorrespondenceSet:
    """The k most confident non-dustbin entries as coarse correspondences."""
    if k < 1:
        raise ValueError("k must be >= 1")
    interior = assignment.interior
    n, m = interior.shape
    rows, cols = np.divmod(np.arange(n * m), m)
    src, tgt, conf = _ordered_topk(interior.ravel(), rows, cols, k)
    return CorrespondenceSet(src, tgt, conf, level="coarse")


def dense_refine(
    coarse: CorrespondenceSet,
    src_super: SuperpointSet,
    tgt_super: SuperpointSet,
    src_dense_feats: np.ndarray,
    tgt_dense_feats: np.ndarray,
    k_dense: int,
    l_iters: int,
    dustbin_logit: float = 0.0,
    confidence_min: float = 0.0,
) -> CorrespondenceSet:
    """Per matched patch: dense similarity, Sinkhorn, top-k; merged globally.

    Pairs emitted by several patches keep their maximum-confidence instance.
    Indices in the result are global dense-point indices, and every pair
    carries the coarse patch that produced it.  Pairs below ``confidence_min``
    are dropped: patches whose points do not actually correspond spread their
    assignment mass and produce only low-confidence entries.
    """
    if k_dense < 1:
        raise ValueError("k_dense must be >= 1")
    found: list[tuple[int, int, float, int]] = []
    for patch_id, (i, j) in enumerate(
        zip(coarse.src_indices.tolist(), coarse.tgt_indices.tolist())
    ):
        members_p = src_super.groups[i]
        members_q = tgt_super.groups[j]
        if len(members_p) == 0 or len(members_q) == 0:
            logger.info("patch %d (%d, %d) skipped: empty group", patch_id, i, j)
            continue
        scores = feature_similarity(
            src_dense_feats[members_p], tgt_dense_feats[members_q]
        )
        assignment = sinkhorn(
            dustbin_augment(scores, dustbin_logit), l_iters, dustbin_logit
        )
        # one-to-one within a patch: duplicate points would make the local
        # rigid solve degenerate by construction
        r, c, v = _exclusive_topk(assignment.interior, k_dense)
        for x, y, conf in zip(r, c, v):
            if conf >= confidence_min:
                found.append((int(members_p[x]), int(members_q[y]), conf, patch_id))

    # deterministic merge: group duplicates, keep max confidence (tie: lowest
    # patch id), then order by confidence descending with (src, tgt) tie-break
    found.sort(key=lambda e: (e[0], e[1], -e[2], e[3]))
    merged: list[tuple[int, int, float, int]] = []
    for entry in found:
        if merged and merged[-1][0] == entry[0] and merged[-1][1] == entry[1]:
            continue
        merged.append(entry)
    merged.sort(key=lambda e: (-e[2], e[0], e[1]))
    return CorrespondenceSet(
        np.array([e[0] for e in merged], dtype=np.int64),
        np.array([e[1] for e in merged], dtype=np.int64),
        np.array([e[2] for e in merged]),
        level="dense",
        patch_ids=np.array([e[3] for e in merged], dtype=np.int64),
    )
