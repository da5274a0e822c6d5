"""NumPy implementations of the hot kernels.

Semantics match ``cmha._kernels._core`` exactly; the compiled lane is an
optimisation, not a behaviour change.  Both lanes are exercised by the same
tests.
"""

from __future__ import annotations

import math

import numpy as np

LANE = "fallback"


def sinkhorn_core(kernel: np.ndarray, n_iters: int) -> tuple[np.ndarray, float, float]:
    """Alternating row/column normalisation of a dustbin-augmented kernel.

    ``kernel`` is a nonnegative (n+1) x (m+1) array whose last row and column
    are the dustbin.  Ordinary rows and columns are driven to unit sums; the
    dustbin row and column are exempt from that constraint and carry the
    complementary marginals m and n instead, which is what makes the
    balancing converge for any sign pattern of the scores.  Returns the
    balanced matrix plus the worst non-dustbin row/column residuals measured
    after the final iteration.
    """
    z = np.array(kernel, dtype=np.float64, copy=True)
    n = z.shape[0] - 1
    m = z.shape[1] - 1
    row_marginal = np.concatenate([np.ones(n), [float(m)]])
    col_marginal = np.concatenate([np.ones(m), [float(n)]])
    for _ in range(n_iters):
        row_sums = z.sum(axis=1)
        if np.any(row_sums[:n] <= 0.0):
            raise ValueError("degenerate scores: zero row mass")
        row_sums[n] = row_sums[n] if row_sums[n] > 0.0 else 1.0  # closed dustbin
        z *= (row_marginal / row_sums)[:, None]
        col_sums = z.sum(axis=0)
        if np.any(col_sums[:m] <= 0.0):
            raise ValueError("degenerate scores: zero column mass")
        col_sums[m] = col_sums[m] if col_sums[m] > 0.0 else 1.0
        z *= (col_marginal / col_sums)[None, :]
    row_res = float(np.abs(z[:n].sum(axis=1) - 1.0).max()) if n else 0.0
    col_res = float(np.abs(z[:, :m].sum(axis=0) - 1.0).max()) if m else 0.0
    return z, row_res, col_res


def triplet_angles(coords: np.ndarray, neighbor_order: np.ndarray, k: int) -> np.ndarray:
    """Angles at i between (p_j - p_i) and the k nearest anchors of i.

    ``neighbor_order[i]`` lists all indices != i sorted by distance to i.  The
    anchor set for pair (i, j) is the first k candidates excluding j; either
    vector degenerating to zero length yields angle 0.
    """
    n = coords.shape[0]
    out = np.zeros((n, n, k), dtype=np.float64)
    if n == 0 or k == 0:
        return out
    tops = neighbor_order[:, : k + 1]  # (n, k+1) candidate anchors
    # stable argsort pushes the entry equal to j to the back of each row
    hit_j = tops[:, None, :] == np.arange(n)[None, :, None]  # (n, n, k+1)
    order = np.argsort(hit_j, axis=2, kind="stable")
    anchors = np.take_along_axis(
        np.broadcast_to(tops[:, None, :], hit_j.shape), order, axis=2
    )[:, :, :k]  # (n, n, k)

    v1 = coords[None, :, :] - coords[:, None, :]  # (n, n, 3)
    v2 = coords[anchors] - coords[:, None, None, :]  # (n, n, k, 3)
    cross = np.cross(v1[:, :, None, :], v2)
    sin_norm = np.linalg.norm(cross, axis=3)
    cos_val = np.einsum("ijd,ijkd->ijk", v1, v2)
    angles = np.arctan2(sin_norm, cos_val)

    n1 = np.linalg.norm(v1, axis=2)
    n2 = np.linalg.norm(v2, axis=3)
    angles[(n1[:, :, None] < 1e-15) | (n2 < 1e-15)] = 0.0
    return angles


def _jacobi_rotate(b, v, p, q):
    app = b[0][p] * b[0][p] + b[1][p] * b[1][p] + b[2][p] * b[2][p]
    aqq = b[0][q] * b[0][q] + b[1][q] * b[1][q] + b[2][q] * b[2][q]
    apq = b[0][p] * b[0][q] + b[1][p] * b[1][q] + b[2][p] * b[2][q]
    if apq == 0.0 or abs(apq) <= 1e-15 * math.sqrt(app * aqq):
        return 0.0
    tau = (aqq - app) / (2.0 * apq)
    if tau >= 0.0:
        t = 1.0 / (tau + math.sqrt(1.0 + tau * tau))
    else:
        t = -1.0 / (-tau + math.sqrt(1.0 + tau * tau))
    c = 1.0 / math.sqrt(1.0 + t * t)
    s = c * t
    for row in range(3):
        bp = b[row][p]
        bq = b[row][q]
        b[row][p] = c * bp - s * bq
        b[row][q] = s * bp + c * bq
        vp = v[row][p]
        vq = v[row][q]
        v[row][p] = c * vp - s * vq
        v[row][q] = s * vp + c * vq
    return abs(apq)


def jacobi_svd3(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One-sided Jacobi SVD of a 3x3 matrix: a = u @ diag(s) @ v.T.

    Singular values return nonincreasing and nonnegative; u and v are
    orthogonal, with u completed to a full basis when the rank drops.
    """
    b = [[float(a[i, j]) for j in range(3)] for i in range(3)]
    v = [[1.0 if i == j else 0.0 for j in range(3)] for i in range(3)]
    for _ in range(30):
        off = 0.0
        for p, q in ((0, 1), (0, 2), (1, 2)):
            off = max(off, _jacobi_rotate(b, v, p, q))
        if off == 0.0:
            break

    norms = [
        math.sqrt(b[0][j] * b[0][j] + b[1][j] * b[1][j] + b[2][j] * b[2][j])
        for j in range(3)
    ]
    order = sorted(range(3), key=lambda j: (-norms[j], j))
    s_out = [norms[j] for j in order]
    v_out = [[v[i][order[j]] for j in range(3)] for i in range(3)]

    tol = 1e-13 * s_out[0] if s_out[0] > 0.0 else 0.0
    u_cols: list[list[float]] = []
    for j in range(3):
        sj = s_out[j]
        col = order[j]
        if sj > tol and sj > 0.0:
            u_cols.append([b[0][col] / sj, b[1][col] / sj, b[2][col] / sj])
        else:
            u_cols.append(_complete_column(u_cols))
    u_out = [[u_cols[j][i] for j in range(3)] for i in range(3)]
    return (
        np.array(u_out, dtype=np.float64),
        np.array(s_out, dtype=np.float64),
        np.array(v_out, dtype=np.float64),
    )


def _complete_column(existing: list[list[float]]) -> list[float]:
    """Deterministic unit vector orthogonal to the accumulated columns."""
    for axis in range(3):
        cand = [0.0, 0.0, 0.0]
        cand[axis] = 1.0
        for col in existing:
            dot = cand[0] * col[0] + cand[1] * col[1] + cand[2] * col[2]
            cand = [cand[i] - dot * col[i] for i in range(3)]
        norm = math.sqrt(cand[0] ** 2 + cand[1] ** 2 + cand[2] ** 2)
        if norm > 1e-6:
            return [cand[i] / norm for i in range(3)]
    raise RuntimeError("failed to complete orthogonal basis")


def count_inliers_batch(
    rotations: np.ndarray,
    translations: np.ndarray,
    src: np.ndarray,
    tgt: np.ndarray,
    radius: float,
) -> np.ndarray:
    """Per-candidate count of pairs with ||R p + t - q|| < radius."""
    moved = np.einsum("cij,pj->cpi", rotations, src) + translations[:, None, :]
    dist = np.linalg.norm(moved - tgt[None, :, :], axis=2)
    return (dist < radius).sum(axis=1).astype(np.int64)
