"""Registration error metrics shared by the pipeline, evaluation, and tests."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from cmha.geometry import RigidTransform


def transform_errors(
    estimated: RigidTransform, ground_truth: RigidTransform
) -> tuple[float, float]:
    """(rotation error in degrees, translation error in meters)."""
    trace = float(np.trace(ground_truth.rotation.T @ estimated.rotation))
    arg = min(1.0, max(-1.0, (trace - 1.0) / 2.0))
    rre = math.degrees(math.acos(arg))
    rte = float(np.linalg.norm(estimated.translation - ground_truth.translation))
    return rre, rte


def correspondence_inlier_ratio(
    corrs,
    src_points: np.ndarray,
    tgt_points: np.ndarray,
    gt: RigidTransform,
    radius: float,
) -> float:
    """Fraction of correspondences landing within ``radius`` under ``gt``."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    if len(corrs.src_indices) == 0:
        warnings.warn("empty correspondence set, inlier ratio defined as 0")
        return 0.0
    moved = gt.apply(src_points[corrs.src_indices])
    dist = np.linalg.norm(moved - tgt_points[corrs.tgt_indices], axis=1)
    return float(np.mean(dist < radius))


def correspondence_rmse(
    src_points: np.ndarray,
    tgt_points: np.ndarray,
    transform: RigidTransform,
) -> float:
    """Root-mean-square residual of paired points under a transform."""
    if len(src_points) == 0:
        raise ValueError("no pairs to evaluate")
    residual = transform.apply(src_points) - tgt_points
    return float(np.sqrt(np.mean(np.sum(residual**2, axis=1))))


@dataclass
class MetricsReport:
    """Per-pair evaluation record; fraction fields live in [0, 1]."""

    rre: float
    rte: float
    rmse: float
    inlier_ratio: float
    fmr: float
    rr: float
    pir: float

    def __post_init__(self):
        if self.rre < 0 or self.rte < 0 or self.rmse < 0:
            raise ValueError("errors must be nonnegative")
        for name in ("inlier_ratio", "fmr", "rr", "pir"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be a fraction in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "rre": self.rre,
            "rte": self.rte,
            "rmse": self.rmse,
            "inlier_ratio": self.inlier_ratio,
            "fmr": self.fmr,
            "rr": self.rr,
            "pir": self.pir,
        }
