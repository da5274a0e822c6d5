"""Ground-truth-known scene synthesis standing in for learned backbones.

Scenes are pure functions of their configuration: geometry, crops, noise and
features all come from one fixed xorshift stream, so identical configs yield
bit-identical scenes on any platform.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from cmha.estimation import load_transform, save_transform
from cmha.geometry import (
    PointCloud,
    RigidTransform,
    SuperpointSet,
    build_superpoint_set,
    pooled_group_features,
    random_rotation,
)
from cmha.matching import CorrespondenceSet
from cmha.ply import read_ply, write_ply
from cmha.rng import Xorshift64Star, derive_seed

_SCENE_SALT = 0x5CE9E
_FEATURE_SALT = 0xFEA7
OVERLAP_RADIUS = 0.05  # metric used both for crop carving and overlap tables


@dataclass(frozen=True)
class SceneConfig:
    n_points: int = 512
    n_superpoints: int = 32
    overlap_fraction: float = 0.5
    noise_sigma: float = 0.01
    outlier_fraction: float = 0.0
    feature_dim: int = 24
    feature_noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_points < 8:
            raise ValueError("n_points must be >= 8")
        if not 1 <= self.n_superpoints <= self.n_points:
            raise ValueError("n_superpoints must lie in [1, n_points]")
        for name in ("overlap_fraction", "outlier_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.noise_sigma < 0 or self.feature_noise_sigma < 0:
            raise ValueError("noise levels must be nonnegative")
        if self.feature_dim >= self.n_points:
            raise ValueError("feature_dim must be below n_points")


@dataclass(frozen=True)
class ImagePatchGrid:
    features: np.ndarray  # (rows * cols, d)
    pixels: np.ndarray  # (rows * cols, 2) cell centers
    rows: int
    cols: int


@dataclass
class SyntheticScene:
    src: PointCloud
    tgt: PointCloud
    gt: RigidTransform
    src_super: SuperpointSet
    tgt_super: SuperpointSet
    overlap_table: np.ndarray
    gt_correspondences: CorrespondenceSet
    config: SceneConfig
    src_img: ImagePatchGrid | None = None
    tgt_img: ImagePatchGrid | None = None
    # provider internals: clean base geometry and the two crop index ranges,
    # kept so features can be evaluated backbone-style on uncorrupted shapes
    base_points: np.ndarray | None = None
    src_ranks: np.ndarray | None = None
    tgt_ranks: np.ndarray | None = None
    base_labels: np.ndarray | None = None
    repeated_patches: dict | None = None


def _draw_patch_params(rng: Xorshift64Star, force_plane: bool = False) -> dict:
    params = {"roughness": rng.uniform_in(0.015, 0.05)}
    if force_plane or rng.uniform() < 0.75:
        params.update(
            kind="plane",
            extent_u=rng.uniform_in(0.3, 0.6),
            extent_v=rng.uniform_in(0.3, 0.6),
            grade=rng.uniform_in(1.0, 2.0),
        )
    else:
        params.update(kind="sphere", radius=rng.uniform_in(0.15, 0.3))
    return params


def _patch_local_points(rng: Xorshift64Star, size: int, params: dict) -> np.ndarray:
    """Local coordinates of one rough surface patch (plane or sphere)."""
    local = np.empty((size, 3))
    roughness = params["roughness"]
    if params["kind"] == "plane":
        extent_u, extent_v, grade = params["extent_u"], params["extent_v"], params["grade"]
        for row in range(size):
            local[row] = (
                (rng.uniform() ** grade - 0.5) * extent_u,
                (rng.uniform() - 0.5) * extent_v,
                rng.gaussian() * roughness,
            )
    else:
        radius = params["radius"]
        for row in range(size):
            z = 1.0 - 2.0 * rng.uniform()
            phi = 2.0 * np.pi * rng.uniform()
            ring = math.sqrt(max(0.0, 1.0 - z * z))
            rad = radius * (1.0 + rng.gaussian() * roughness)
            local[row] = (rad * ring * math.cos(phi), rad * ring * math.sin(phi), rad * z)
    return local


def _lattice_local_points(
    rng: Xorshift64Star, size: int, spacing: float, cols_offset: int = 0
) -> np.ndarray:
    """Jittered regular grid: a repetitive structure whose interior points
    all share one descriptor, so no point of it can be matched reliably.

    The jitter must be drawn fresh for every instance (a copied pattern would
    hand each point a private fingerprint), and instances get different
    aspect ratios so their boundary frames are not congruent.
    """
    cols = max(2, int(round(math.sqrt(size))) + cols_offset)
    rows = (size + cols - 1) // cols
    local = np.empty((size, 3))
    idx = 0
    for r in range(rows):
        for c in range(cols):
            if idx == size:
                break
            local[idx] = (
                (r - (rows - 1) / 2.0) * spacing + rng.gaussian() * 0.002,
                (c - (cols - 1) / 2.0) * spacing + rng.gaussian() * 0.002,
                rng.gaussian() * 0.002,
            )
            idx += 1
    return local


def _sample_base_cloud(rng: Xorshift64Star, n_base: int) -> np.ndarray:
    """Scene geometry: compact rough surface patches spread through the cube.

    Patches are internally dense islands separated by clear gaps, so interior
    points keep their whole neighbor set inside the patch under any crop.
    One patch is duplicated at a second pose: its rigid copy carries an
    identical point constellation, giving the scene a repeated structure that
    local descriptors cannot tell apart.
    """
    n_patches = 10 + rng.below(4)
    weights = [math.exp(rng.uniform_in(math.log(0.5), math.log(3.0))) for _ in range(n_patches)]
    order = sorted(range(n_patches), key=lambda i: weights[i])
    # two repeated structures: the lightest patch becomes a lattice pair
    # (tiled wall, pointwise unmatchable) and the next-lightest a twin pair of
    # rough planes (same shape statistics, independent constellations)
    lattice_of = order[0]
    twin_of = order[1]
    weights += [weights[lattice_of], weights[twin_of]]
    total = sum(weights)
    sizes = [max(36, int(round(n_base * w / total))) for w in weights]
    sizes[-2] = sizes[lattice_of]
    sizes[-1] = sizes[twin_of]
    adjustable = [i for i in range(n_patches) if i not in (lattice_of, twin_of)]
    while sum(sizes) > n_base:
        big = max(adjustable, key=lambda i: sizes[i])
        sizes[big] -= 1
    while sum(sizes) < n_base:
        small = min(adjustable, key=lambda i: sizes[i])
        sizes[small] += 1

    # lattice instances share tile spacing (descriptor collision) but carry
    # independent jitter and aspect, so no point has a usable fingerprint;
    # twin planes share shape parameters, so only context can tell them apart
    lattice_spacing = rng.uniform_in(0.08, 0.12)
    twin_params = _draw_patch_params(rng, force_plane=True)
    locals_ = []
    for idx in range(n_patches):
        if idx == lattice_of:
            locals_.append(_lattice_local_points(rng, sizes[idx], lattice_spacing))
        elif idx == twin_of:
            locals_.append(_patch_local_points(rng, sizes[idx], twin_params))
        else:
            locals_.append(_patch_local_points(rng, sizes[idx], _draw_patch_params(rng)))
    locals_.append(_lattice_local_points(rng, sizes[-2], lattice_spacing, cols_offset=2))
    locals_.append(_patch_local_points(rng, sizes[-1], twin_params))

    # centers stay far enough from the cube wall that no point is clipped,
    # so a cloned patch keeps a bit-identical constellation
    centers: list[np.ndarray] = []
    for _ in range(len(locals_)):
        candidate = np.array([rng.uniform_in(-1.0, 1.0) for _ in range(3)])
        for _attempt in range(200):
            if all(np.linalg.norm(candidate - c) > 0.75 for c in centers):
                break
            candidate = np.array([rng.uniform_in(-1.0, 1.0) for _ in range(3)])
        centers.append(candidate)

    placed = [
        center + local @ random_rotation(rng).T
        for local, center in zip(locals_, centers)
    ]
    points = np.concatenate(placed)
    assert len(points) == n_base
    labels = np.concatenate(
        [np.full(len(local), idx, dtype=np.int64) for idx, local in enumerate(locals_)]
    )
    repeats = {"lattice": (lattice_of, n_patches), "twin": (twin_of, n_patches + 1)}
    return np.clip(points, -1.5, 1.5), labels, repeats


def _truncated_noise(rng: Xorshift64Star, count: int, sigma: float) -> np.ndarray:
    """Gaussian offsets with norm capped just below 3 sigma."""
    noise = np.array(rng.gaussians(count * 3)).reshape(count, 3) * sigma
    if sigma > 0:
        cap = 3.0 * sigma * (1.0 - 1e-9)
        norms = np.linalg.norm(noise, axis=1)
        over = norms > cap
        noise[over] *= (cap / norms[over])[:, None]
    return noise


def _measured_overlap(src_aligned: np.ndarray, tgt_pts: np.ndarray) -> float:
    d2 = ((src_aligned[:, None, :] - tgt_pts[None, :, :]) ** 2).sum(axis=2)
    return float(np.mean(np.sqrt(d2.min(axis=1)) < OVERLAP_RADIUS))


def _canonical_profile_ramp(feature_dim: int) -> np.ndarray:
    """Z-scored sqrt(k) curve: the ideal sorted-distance profile of uniform
    surface sampling, independent of the local density."""
    ramp = np.sqrt(np.arange(1.0, feature_dim + 1.0))
    return (ramp - ramp.mean()) / ramp.std()


def neighbor_distance_features(points: np.ndarray, feature_dim: int) -> np.ndarray:
    """Rigid-invariant descriptor: z-scored sorted distances to the
    feature_dim nearest neighbors of each point.

    The per-row z-scoring travels with the point, so the descriptor of a
    physical location does not depend on the view it is computed in.  Every
    z-scored sorted profile hugs the same monotone ramp, which would leave
    dot products with almost no contrast, so the canonical ramp is removed
    and rows are rescaled to norm sqrt(d): similarity then compares profile
    shape deviations, cosine-style.
    """
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) <= feature_dim:
        raise ValueError("need more points than feature dimensions")
    dist = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2)
    dist.sort(axis=1)
    feats = dist[:, 1 : feature_dim + 1]  # column 0 is the self distance
    mean = feats.mean(axis=1, keepdims=True)
    std = np.maximum(feats.std(axis=1, keepdims=True), 1e-12)
    shape = (feats - mean) / std - _canonical_profile_ramp(feature_dim)
    norm = np.maximum(np.linalg.norm(shape, axis=1, keepdims=True), 1e-12)
    return np.sqrt(feature_dim) * shape / norm


@dataclass(frozen=True)
class SceneFeatures:
    src_dense: np.ndarray
    tgt_dense: np.ndarray
    src_super: np.ndarray
    tgt_super: np.ndarray


def synth_features(scene: SyntheticScene, cfg: SceneConfig) -> SceneFeatures:
    """Dense and superpoint features for both clouds, deterministic in cfg.seed.

    Descriptors are evaluated on the clean base geometry and indexed into
    each crop, standing in for a trained backbone: corresponding points get
    near-identical features by construction, and feature quality is degraded
    only through the explicit feature noise knob.
    """
    rng = Xorshift64Star(derive_seed(cfg.seed, _FEATURE_SALT))
    if scene.base_points is not None:
        base_feats = neighbor_distance_features(scene.base_points, cfg.feature_dim)
        dense_views = [base_feats[scene.src_ranks], base_feats[scene.tgt_ranks]]
    else:
        # pair loaded without provider internals: evaluate per cloud
        dense_views = [
            neighbor_distance_features(scene.src.points, cfg.feature_dim),
            neighbor_distance_features(scene.tgt.points, cfg.feature_dim),
        ]
    out = []
    for dense, supers in zip(dense_views, (scene.src_super, scene.tgt_super)):
        if cfg.feature_noise_sigma > 0:
            noise = np.array(rng.gaussians(dense.size)).reshape(dense.shape)
            dense = dense + cfg.feature_noise_sigma * noise
        out.append((dense, pooled_group_features(dense, supers.groups)))
    return SceneFeatures(out[0][0], out[1][0], out[0][1], out[1][1])


def project_cloud_to_grid(
    cloud: PointCloud, grid: tuple[int, int] = (8, 8), focal: float = 1.0
) -> ImagePatchGrid:
    """Pinhole projection of one cloud onto a virtual camera grid.

    The camera sits 4 m behind the cloud centroid along z; each cell holds
    the mean feature of the points projecting into it (zeros when empty) and
    the cell-center pixel coordinates.
    """
    rows, cols = grid
    if rows < 2 or cols < 2:
        raise ValueError("grid must be at least 2x2")
    if cloud.features is None:
        raise ValueError("cloud features required for image synthesis")
    origin = cloud.points.mean(axis=0) - np.array([0.0, 0.0, 4.0])
    rel = cloud.points - origin
    in_front = rel[:, 2] > 0
    if not in_front.any():
        raise ValueError("all points behind camera")
    u = focal * rel[in_front, 0] / rel[in_front, 2]
    v = focal * rel[in_front, 1] / rel[in_front, 2]
    u_min, u_max = float(u.min()), float(u.max())
    v_min, v_max = float(v.min()), float(v.max())
    span_u = max(u_max - u_min, 1e-9)
    span_v = max(v_max - v_min, 1e-9)
    col = np.minimum((cols * (u - u_min) / span_u).astype(np.int64), cols - 1)
    row = np.minimum((rows * (v - v_min) / span_v).astype(np.int64), rows - 1)
    cell = row * cols + col

    d = cloud.features.shape[1]
    features = np.zeros((rows * cols, d))
    counts = np.bincount(cell, minlength=rows * cols).astype(np.float64)
    np.add.at(features, cell, cloud.features[in_front])
    occupied = counts > 0
    features[occupied] /= counts[occupied, None]

    rr, cc = np.divmod(np.arange(rows * cols), cols)
    pixels = np.stack(
        [
            u_min + (cc + 0.5) * span_u / cols,
            v_min + (rr + 0.5) * span_v / rows,
        ],
        axis=1,
    )
    return ImagePatchGrid(features, pixels, rows, cols)


def synth_image_grid(
    scene: SyntheticScene, grid: tuple[int, int] = (8, 8), focal: float = 1.0
) -> tuple[ImagePatchGrid, ImagePatchGrid]:
    """Per-cloud image patch grids for a scene."""
    return (
        project_cloud_to_grid(scene.src, grid, focal),
        project_cloud_to_grid(scene.tgt, grid, focal),
    )


def _patch_overlap_table(
    src_aligned: np.ndarray,
    tgt_pts: np.ndarray,
    src_groups: list[np.ndarray],
    tgt_groups: list[np.ndarray],
) -> np.ndarray:
    dist = np.linalg.norm(src_aligned[:, None, :] - tgt_pts[None, :, :], axis=2)
    table = np.zeros((len(src_groups), len(tgt_groups)))
    for i, gi in enumerate(src_groups):
        if len(gi) == 0:
            continue
        block = dist[gi]
        for j, gj in enumerate(tgt_groups):
            if len(gj) == 0:
                continue
            table[i, j] = float(np.mean(block[:, gj].min(axis=1) < OVERLAP_RADIUS))
    return table


def generate_scene(cfg: SceneConfig) -> SyntheticScene:
    """Partial-overlap pair with known ground truth, superpoints, features,
    image grids, overlap table, and exact correspondences."""
    rng = Xorshift64Star(derive_seed(cfg.seed, _SCENE_SALT))
    n = cfg.n_points
    base, labels, repeats = _sample_base_cloud(rng, 2 * n)

    direction = np.array(rng.unit_vector3())
    order = np.argsort(base @ direction, kind="stable")
    base = base[order]
    labels = labels[order]

    gt = RigidTransform(
        random_rotation(rng), np.array([rng.uniform_in(-1.0, 1.0) for _ in range(3)])
    )
    noise = _truncated_noise(rng, 2 * n, cfg.noise_sigma)

    src_pts = base[:n]
    src_aligned = gt.apply(src_pts)

    def measured_at(shift_value: int) -> float:
        tgt_try = gt.apply(base[shift_value : shift_value + n]) + noise[shift_value : shift_value + n]
        return _measured_overlap(src_aligned, tgt_try)

    # start from the analytic guess (shared count = overlap * n), then bisect;
    # the guess also keeps the full-overlap case exactly at shift 0
    shift = None
    guess = int(round((1.0 - cfg.overlap_fraction) * n))
    if abs(measured_at(guess) - cfg.overlap_fraction) <= 0.05:
        shift = guess
    else:
        lo, hi = 0, n
        for _ in range(100):
            if lo > hi:
                break
            mid = (lo + hi) // 2
            measured = measured_at(mid)
            if abs(measured - cfg.overlap_fraction) <= 0.05:
                shift = mid
                break
            if measured > cfg.overlap_fraction:
                lo = mid + 1
            else:
                hi = mid - 1
    if shift is None:
        raise ValueError(
            f"cannot reach requested overlap {cfg.overlap_fraction} for seed {cfg.seed}"
        )
    tgt_pts = gt.apply(base[shift : shift + n]) + noise[shift : shift + n]

    shared = max(0, n - shift)
    gt_corrs = CorrespondenceSet(
        np.arange(shift, shift + shared, dtype=np.int64),
        np.arange(shared, dtype=np.int64),
        np.ones(shared),
        level="dense",
    )

    scene = SyntheticScene(
        src=PointCloud(src_pts),
        tgt=PointCloud(tgt_pts),
        gt=gt,
        src_super=None,  # type: ignore[arg-type]
        tgt_super=None,  # type: ignore[arg-type]
        overlap_table=None,  # type: ignore[arg-type]
        gt_correspondences=gt_corrs,
        config=cfg,
        base_points=base,
        src_ranks=np.arange(n, dtype=np.int64),
        tgt_ranks=np.arange(shift, shift + n, dtype=np.int64),
        base_labels=labels,
        repeated_patches=repeats,
    )

    # features need superpoint groups; groups need plain geometry only
    dense_placeholder = np.zeros((n, cfg.feature_dim))
    scene.src_super = build_superpoint_set(src_pts, dense_placeholder, cfg.n_superpoints)
    scene.tgt_super = build_superpoint_set(tgt_pts, dense_placeholder, cfg.n_superpoints)
    feats = synth_features(scene, cfg)
    scene.src.features = feats.src_dense
    scene.tgt.features = feats.tgt_dense
    scene.src_super.features = feats.src_super
    scene.tgt_super.features = feats.tgt_super

    scene.overlap_table = _patch_overlap_table(
        src_aligned, tgt_pts, scene.src_super.groups, scene.tgt_super.groups
    )
    scene.src_img, scene.tgt_img = synth_image_grid(scene)
    return scene


def corrupt_correspondences(
    corrs: CorrespondenceSet,
    outlier_fraction: float,
    seed: int,
    n_targets: int | None = None,
) -> CorrespondenceSet:
    """Rewire an exact-count random subset of target indices.

    Every selected pair receives a fresh uniform target index, redrawn until
    the pair both changes and stays unique.
    """
    if not 0.0 <= outlier_fraction <= 1.0:
        raise ValueError("outlier_fraction must lie in [0, 1]")
    k = len(corrs)
    n_corrupt = round(outlier_fraction * k)
    tgt = corrs.tgt_indices.copy()
    if n_corrupt and n_targets is None:
        n_targets = int(tgt.max()) + 1
    if n_corrupt and n_targets < 2:
        raise ValueError("need at least two target indices to rewire")
    rng = Xorshift64Star(seed)
    positions = list(range(k))
    rng.shuffle(positions)
    src = corrs.src_indices
    taken = set(zip(src.tolist(), tgt.tolist()))
    for pos in sorted(positions[:n_corrupt]):
        original = int(tgt[pos])
        taken.discard((int(src[pos]), original))
        while True:
            candidate = rng.below(n_targets)
            if candidate != original and (int(src[pos]), candidate) not in taken:
                break
        tgt[pos] = candidate
        taken.add((int(src[pos]), candidate))
    return CorrespondenceSet(
        corrs.src_indices.copy(), tgt, corrs.confidences.copy(), level=corrs.level
    )


def export_scene(scene: SyntheticScene, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_ply(out / "src.ply", scene.src.points)
    write_ply(out / "tgt.ply", scene.tgt.points)
    save_transform(out / "gt.json", scene.gt)
    (out / "meta.json").write_text(json.dumps(asdict(scene.config), indent=2) + "\n")


@dataclass(frozen=True)
class LoadedScene:
    src: PointCloud
    tgt: PointCloud
    gt: RigidTransform
    config: SceneConfig


def load_scene_dir(scene_dir) -> LoadedScene:
    path = Path(scene_dir)
    config = SceneConfig(**json.loads((path / "meta.json").read_text()))
    return LoadedScene(
        PointCloud(read_ply(path / "src.ply")),
        PointCloud(read_ply(path / "tgt.ply")),
        load_transform(path / "gt.json"),
        config,
    )
