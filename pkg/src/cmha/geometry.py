"""Point-cloud containers, rigid transforms, and superpoint grouping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from cmha.rng import Xorshift64Star

_ROT_TOL = 1e-9


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must be (n, 3), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")
    return pts


@dataclass
class PointCloud:
    """Ordered 3D points with optional per-point feature rows."""

    points: np.ndarray
    features: np.ndarray | None = None

    def __post_init__(self):
        self.points = _as_points(self.points)
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)
            if self.features.ndim != 2 or self.features.shape[0] != len(self.points):
                raise ValueError("features must have one row per point")

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class RigidTransform:
    """Proper rotation plus translation; validated on construction."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if np.abs(r.T @ r - np.eye(3)).max() > _ROT_TOL:
            raise ValueError("rotation is not orthogonal")
        if abs(np.linalg.det(r) - 1.0) > _ROT_TOL:
            raise ValueError("rotation determinant must be +1")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("transform entries must be finite")
        self.rotation = r
        self.translation = t

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform applying ``other`` first, then ``self``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -(self.rotation.T @ self.translation))


def apply_transform(cloud: PointCloud, transform: RigidTransform) -> PointCloud:
    """Move every point by the rigid transform; features ride along."""
    return PointCloud(transform.apply(cloud.points), cloud.features)


def random_rotation(rng: Xorshift64Star) -> np.ndarray:
    """Rotation drawn uniformly over SO(3) via a normalized quaternion."""
    while True:
        q = np.array([rng.gaussian() for _ in range(4)])
        n = np.linalg.norm(q)
        if n > 1e-12:
            break
    w, x, y, z = q / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def farthest_point_sample(points: np.ndarray, count: int, start: int = 0) -> np.ndarray:
    """Indices of a farthest-point subsample, seeded at ``start``."""
    pts = _as_points(points)
    n = len(pts)
    if not 1 <= count <= n:
        raise ValueError(f"count must be in [1, {n}]")
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = start
    dist = np.linalg.norm(pts - pts[start], axis=1)
    for i in range(1, count):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        dist = np.minimum(dist, np.linalg.norm(pts - pts[nxt], axis=1))
    return chosen


def group_by_nearest_superpoint(points, superpoints) -> list[np.ndarray]:
    """Partition dense point indices by nearest superpoint.

    Ties go to the lowest superpoint index; superpoints with no members keep
    an empty group so index spaces stay aligned.
    """
    pts = points.points if isinstance(points, PointCloud) else _as_points(points)
    sup = _as_points(superpoints)
    if len(sup) == 0:
        raise ValueError("no superpoints")
    d2 = ((pts[:, None, :] - sup[None, :, :]) ** 2).sum(axis=2)
    owner = np.argmin(d2, axis=1)  # argmin returns the lowest index on ties
    return [np.flatnonzero(owner == k) for k in range(len(sup))]


@dataclass
class SuperpointSet:
    """Superpoint coordinates, their dense-point groups, and features."""

    coords: np.ndarray
    groups: list[np.ndarray] = field(default_factory=list)
    features: np.ndarray | None = None

    def __post_init__(self):
        self.coords = _as_points(self.coords)
        if len(self.groups) != len(self.coords):
            raise ValueError("one group per superpoint required")

    def __len__(self) -> int:
        return len(self.coords)


def pooled_group_features(dense_features: np.ndarray, groups: list[np.ndarray]) -> np.ndarray:
    """Group means rescaled to norm sqrt(d).

    The rescaling keeps dot-product similarity a cosine measure, so dense
    regions do not dominate the score matrix purely by feature magnitude.
    """
    d = dense_features.shape[1]
    out = np.zeros((len(groups), d))
    for k, members in enumerate(groups):
        if len(members):
            mean = dense_features[members].mean(axis=0)
            norm = np.linalg.norm(mean)
            if norm > 1e-12:
                out[k] = np.sqrt(d) * mean / norm
    return out


def build_superpoint_set(
    points: np.ndarray, dense_features: np.ndarray, n_superpoints: int
) -> SuperpointSet:
    """Farthest-point superpoints with nearest-point groups and pooled features."""
    pts = _as_points(points)
    idx = farthest_point_sample(pts, n_superpoints)
    coords = pts[idx]
    groups = group_by_nearest_superpoint(pts, coords)
    return SuperpointSet(coords, groups, pooled_group_features(dense_features, groups))
