import numpy as np
import pytest

from cmha.geometry import PointCloud
from cmha.matching import CorrespondenceSet
from cmha.metrics import correspondence_inlier_ratio
from cmha.ply import read_ply, write_ply
from cmha.rng import Xorshift64Star, derive_seed, splitmix64
from cmha.synth import (
    OVERLAP_RADIUS,
    SceneConfig,
    corrupt_correspondences,
    export_scene,
    generate_scene,
    load_scene_dir,
    neighbor_distance_features,
    project_cloud_to_grid,
    synth_features,
    synth_image_grid,
)
from conftest import random_rigid

FAST = SceneConfig(n_points=256, n_superpoints=24, overlap_fraction=0.5, seed=5)


class TestRng:
    def test_splitmix_deterministic(self):
        assert splitmix64(0) == splitmix64(0)

    def test_stream_reproducible(self):
        a = Xorshift64Star(123)
        b = Xorshift64Star(123)
        assert [a.next_u64() for _ in range(5)] == [b.next_u64() for _ in range(5)]

    def test_uniform_range(self):
        rng = Xorshift64Star(9)
        values = [rng.uniform() for _ in range(1000)]
        assert all(0.0 <= v < 1.0 for v in values)
        assert 0.4 < np.mean(values) < 0.6

    def test_below_bounds(self):
        rng = Xorshift64Star(4)
        assert all(0 <= rng.below(7) < 7 for _ in range(200))

    def test_gaussian_moments(self):
        rng = Xorshift64Star(11)
        values = np.array(rng.gaussians(4000))
        assert abs(values.mean()) < 0.08
        assert abs(values.std() - 1.0) < 0.08

    def test_derive_seed_decorrelates(self):
        assert derive_seed(1, 2) != derive_seed(1, 3) != derive_seed(2, 2)


class TestGenerateScene:
    def test_full_overlap_zero_noise_is_exact(self):
        cfg = SceneConfig(n_points=256, n_superpoints=16, overlap_fraction=1.0,
                          noise_sigma=0.0, seed=3)
        scene = generate_scene(cfg)
        np.testing.assert_allclose(
            scene.tgt.points, scene.gt.apply(scene.src.points), atol=1e-12
        )
        gtc = scene.gt_correspondences
        assert len(gtc) == 256
        np.testing.assert_array_equal(gtc.src_indices, gtc.tgt_indices)

    def test_same_seed_bit_identical(self):
        a = generate_scene(FAST)
        b = generate_scene(FAST)
        np.testing.assert_array_equal(a.src.points, b.src.points)
        np.testing.assert_array_equal(a.tgt.points, b.tgt.points)
        np.testing.assert_array_equal(a.gt.rotation, b.gt.rotation)
        np.testing.assert_array_equal(a.src.features, b.src.features)
        np.testing.assert_array_equal(a.overlap_table, b.overlap_table)

    def test_requested_overlap_reached(self):
        for seed in range(4):
            cfg = SceneConfig(n_points=384, n_superpoints=24, overlap_fraction=0.3, seed=seed)
            scene = generate_scene(cfg)
            aligned = scene.gt.apply(scene.src.points)
            d = np.linalg.norm(aligned[:, None] - scene.tgt.points[None], axis=2)
            measured = float(np.mean(d.min(axis=1) < OVERLAP_RADIUS))
            assert 0.25 <= measured <= 0.35

    def test_gt_correspondences_are_inliers_at_three_sigma(self):
        cfg = SceneConfig(n_points=256, n_superpoints=16, overlap_fraction=0.6,
                          noise_sigma=0.01, seed=9)
        scene = generate_scene(cfg)
        radius = 3 * cfg.noise_sigma + 1e-9
        ratio = correspondence_inlier_ratio(
            scene.gt_correspondences, scene.src.points, scene.tgt.points, scene.gt, radius
        )
        assert ratio == 1.0

    def test_overlap_table_matches_bruteforce(self):
        scene = generate_scene(FAST)
        aligned = scene.gt.apply(scene.src.points)
        for i in (0, 5, 11):
            gi = scene.src_super.groups[i]
            if len(gi) == 0:
                continue
            for j in (0, 7, 13):
                gj = scene.tgt_super.groups[j]
                if len(gj) == 0:
                    expect = 0.0
                else:
                    hits = 0
                    for p in aligned[gi]:
                        dmin = min(np.linalg.norm(p - q) for q in scene.tgt.points[gj])
                        hits += dmin < OVERLAP_RADIUS
                    expect = hits / len(gi)
                assert scene.overlap_table[i, j] == pytest.approx(expect, abs=1e-12)

    def test_scene_counts(self):
        scene = generate_scene(FAST)
        assert len(scene.src) == FAST.n_points
        assert len(scene.tgt) == FAST.n_points
        assert len(scene.src_super) == FAST.n_superpoints
        assert scene.overlap_table.shape == (FAST.n_superpoints, FAST.n_superpoints)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SceneConfig(n_points=100, n_superpoints=200)
        with pytest.raises(ValueError):
            SceneConfig(overlap_fraction=1.5)
        with pytest.raises(ValueError):
            SceneConfig(n_points=16, feature_dim=24)


class TestSynthFeatures:
    def test_corresponding_points_match_exactly_without_noise(self):
        cfg = SceneConfig(n_points=256, n_superpoints=16, overlap_fraction=1.0,
                          noise_sigma=0.0, seed=2)
        scene = generate_scene(cfg)
        gtc = scene.gt_correspondences
        delta = np.abs(
            scene.src.features[gtc.src_indices] - scene.tgt.features[gtc.tgt_indices]
        ).max()
        assert delta < 1e-6

    def test_rigid_rotation_leaves_descriptor_unchanged(self, rng):
        pts = rng.normal(size=(60, 3))
        t = random_rigid(4)
        a = neighbor_distance_features(pts, 16)
        b = neighbor_distance_features(t.apply(pts), 16)
        assert np.abs(a - b).max() < 1e-6

    def test_feature_noise_monotone(self):
        distances = []
        for sigma in (0.0, 0.1, 0.5):
            cfg = SceneConfig(n_points=256, n_superpoints=16, overlap_fraction=1.0,
                              noise_sigma=0.0, feature_noise_sigma=sigma, seed=6)
            scene = generate_scene(cfg)
            gtc = scene.gt_correspondences
            d = np.linalg.norm(
                scene.src.features[gtc.src_indices] - scene.tgt.features[gtc.tgt_indices],
                axis=1,
            ).mean()
            distances.append(d)
        assert distances[0] < distances[1] < distances[2]

    def test_standalone_op_matches_scene(self):
        scene = generate_scene(FAST)
        feats = synth_features(scene, FAST)
        np.testing.assert_array_equal(feats.src_dense, scene.src.features)
        np.testing.assert_array_equal(feats.tgt_super, scene.tgt_super.features)

    def test_requires_enough_points(self, rng):
        with pytest.raises(ValueError, match="more points"):
            neighbor_distance_features(rng.normal(size=(10, 3)), 24)


class TestImageGrid:
    def test_single_occupied_cell_collects_mean(self):
        # a tight cluster plus one distant point: the far point owns a corner
        pts = np.concatenate([np.zeros((5, 3)), [[2.0, 2.0, 0.0]]])
        feats = np.arange(6, dtype=float)[:, None] * np.ones((1, 4))
        cloud = PointCloud(pts, feats)
        grid = project_cloud_to_grid(cloud, grid=(2, 2), focal=1.0)
        occupied = np.flatnonzero(grid.features.any(axis=1))
        assert len(occupied) == 2
        np.testing.assert_allclose(grid.features[occupied[0]], feats[:5].mean(axis=0))

    def test_empty_cells_are_zero(self):
        scene = generate_scene(FAST)
        grid, _ = synth_image_grid(scene, grid=(16, 16))
        assert np.any(~grid.features.any(axis=1))

    def test_occupancy_matches_per_point_projection(self):
        scene = generate_scene(FAST)
        rows, cols = 8, 8
        grid, _ = synth_image_grid(scene, grid=(rows, cols))
        cloud = scene.src
        origin = cloud.points.mean(axis=0) - np.array([0.0, 0.0, 4.0])
        rel = cloud.points - origin
        u = rel[:, 0] / rel[:, 2]
        v = rel[:, 1] / rel[:, 2]
        span_u = max(u.max() - u.min(), 1e-9)
        span_v = max(v.max() - v.min(), 1e-9)
        counts = np.zeros(rows * cols)
        sums = np.zeros((rows * cols, cloud.features.shape[1]))
        for i in range(len(cloud)):
            c = min(int(cols * (u[i] - u.min()) / span_u), cols - 1)
            r = min(int(rows * (v[i] - v.min()) / span_v), rows - 1)
            counts[r * cols + c] += 1
            sums[r * cols + c] += cloud.features[i]
        for cell in range(rows * cols):
            if counts[cell]:
                np.testing.assert_allclose(
                    grid.features[cell], sums[cell] / counts[cell], atol=1e-9
                )
            else:
                assert not grid.features[cell].any()

    def test_pixel_coords_are_cell_centers(self):
        scene = generate_scene(FAST)
        grid, _ = synth_image_grid(scene, grid=(4, 4))
        assert grid.pixels.shape == (16, 2)
        # centers form a regular 4x4 mesh
        us = np.unique(np.round(grid.pixels[:, 0], 12))
        assert len(us) == 4

    def test_grid_too_small(self):
        scene = generate_scene(FAST)
        with pytest.raises(ValueError, match="grid"):
            synth_image_grid(scene, grid=(1, 5))


class TestCorruption:
    def _corrs(self, n):
        return CorrespondenceSet(np.arange(n), np.arange(n), np.ones(n), level="dense")

    def test_zero_fraction_unchanged(self):
        corrs = self._corrs(30)
        out = corrupt_correspondences(corrs, 0.0, seed=1)
        np.testing.assert_array_equal(out.tgt_indices, corrs.tgt_indices)

    def test_full_fraction_rewires_everything(self):
        corrs = self._corrs(40)
        out = corrupt_correspondences(corrs, 1.0, seed=2, n_targets=40)
        assert np.all(out.tgt_indices != corrs.tgt_indices)

    def test_half_fraction_exact_count(self):
        corrs = self._corrs(100)
        out = corrupt_correspondences(corrs, 0.5, seed=3, n_targets=100)
        assert int((out.tgt_indices != corrs.tgt_indices).sum()) == 50

    def test_deterministic(self):
        corrs = self._corrs(50)
        a = corrupt_correspondences(corrs, 0.3, seed=7, n_targets=50)
        b = corrupt_correspondences(corrs, 0.3, seed=7, n_targets=50)
        np.testing.assert_array_equal(a.tgt_indices, b.tgt_indices)


class TestPlyAndSceneIo:
    def test_ply_round_trip_lossless(self, tmp_path, rng):
        pts = rng.normal(size=(40, 3))
        path = tmp_path / "cloud.ply"
        write_ply(path, pts)
        np.testing.assert_array_equal(read_ply(path), pts)

    def test_ply_ignores_unknown_properties_and_elements(self, tmp_path):
        text = "\n".join(
            [
                "ply",
                "format ascii 1.0",
                "comment exported elsewhere",
                "element vertex 2",
                "property float nx",
                "property float x",
                "property float y",
                "property float z",
                "element face 1",
                "property int count",
                "end_header",
                "9 1 2 3",
                "8 4 5 6",
                "77",
            ]
        )
        path = tmp_path / "cloud.ply"
        path.write_text(text)
        np.testing.assert_array_equal(read_ply(path), [[1, 2, 3], [4, 5, 6]])

    def test_ply_rejects_binary(self, tmp_path):
        path = tmp_path / "cloud.ply"
        path.write_text("ply\nformat binary_little_endian 1.0\nend_header\n")
        with pytest.raises(ValueError, match="ascii"):
            read_ply(path)

    def test_ply_missing_xyz(self, tmp_path):
        path = tmp_path / "cloud.ply"
        path.write_text(
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty float a\nend_header\n1\n"
        )
        with pytest.raises(ValueError, match="x/y/z"):
            read_ply(path)

    def test_scene_export_import_lossless(self, tmp_path):
        scene = generate_scene(FAST)
        out = tmp_path / "scene"
        export_scene(scene, out)
        assert sorted(p.name for p in out.iterdir()) == [
            "gt.json",
            "meta.json",
            "src.ply",
            "tgt.ply",
        ]
        loaded = load_scene_dir(out)
        np.testing.assert_array_equal(loaded.src.points, scene.src.points)
        np.testing.assert_array_equal(loaded.tgt.points, scene.tgt.points)
        np.testing.assert_array_equal(loaded.gt.rotation, scene.gt.rotation)
        assert loaded.config == scene.config

    def test_reimported_config_regenerates_identical_scene(self, tmp_path):
        scene = generate_scene(FAST)
        out = tmp_path / "scene"
        export_scene(scene, out)
        again = generate_scene(load_scene_dir(out).config)
        np.testing.assert_array_equal(again.src.points, scene.src.points)
        np.testing.assert_array_equal(again.src.features, scene.src.features)
