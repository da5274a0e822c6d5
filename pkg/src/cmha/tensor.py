"""Dense linear algebra used by attention and estimation.

Matrices are plain float64 ndarrays.  Masked similarity entries are encoded
as -inf rather than a separate mask array, so matching semantics stay
first-class in the score matrices themselves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cmha import _kernels
from cmha.rng import Xorshift64Star


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D matrices")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape} @ {b.shape}")
    return a @ b


def softmax_rows(scores: np.ndarray) -> np.ndarray:
    """Row softmax with max-subtraction; -inf entries map to exactly 0."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2:
        raise ValueError("softmax_rows expects a 2-D matrix")
    if np.any(np.isnan(s)) or np.any(s == np.inf):
        raise ValueError("scores must be finite or -inf")
    row_max = s.max(axis=1)
    if np.any(np.isneginf(row_max)):
        raise ValueError("fully masked row")
    shifted = s - row_max[:, None]
    # exp(-inf - max) evaluates to 0 without warnings
    with np.errstate(invalid="ignore"):
        e = np.where(np.isneginf(shifted), 0.0, np.exp(shifted))
    return e / e.sum(axis=1, keepdims=True)


def svd3(m: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """SVD of a 3x3 matrix via one-sided Jacobi: m = u @ diag(s) @ v.T."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError("svd3 expects a 3x3 matrix")
    if not np.all(np.isfinite(m)):
        raise ValueError("svd3 requires finite entries")
    return _kernels.jacobi_svd3(m)


@dataclass(frozen=True)
class ProjectionSet:
    """The five d x d projection weights of one attention layer."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_g: np.ndarray
    w_f: np.ndarray
    seed: int

    @property
    def d(self) -> int:
        return self.w_q.shape[0]


def uniform_matrix(rng: Xorshift64Star, rows: int, cols: int, bound: float) -> np.ndarray:
    """Row-major matrix with entries uniform in [-bound, +bound)."""
    flat = [rng.uniform_in(-bound, bound) for _ in range(rows * cols)]
    return np.array(flat, dtype=np.float64).reshape(rows, cols)


def init_projections(d: int, seed: int) -> ProjectionSet:
    """Deterministic stand-in for trained weights, uniform in [-1/sqrt(d), 1/sqrt(d)]."""
    if d < 1:
        raise ValueError("d must be >= 1")
    rng = Xorshift64Star(seed)
    bound = 1.0 / np.sqrt(d)
    w_q, w_k, w_v, w_g, w_f = (uniform_matrix(rng, d, d, bound) for _ in range(5))
    return ProjectionSet(w_q, w_k, w_v, w_g, w_f, seed)
