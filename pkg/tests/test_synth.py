import numpy as np
import pytest

from diffreg import errors
from diffreg.geometry import project, transform
from diffreg.metrics import inlier_ratio, relative_pose_errors
from diffreg.synth import SceneSpec, generate_scene, perturb_pose, substream


class TestGenerateScene:
    def test_correspondences_exact_without_noise(self):
        scene = generate_scene(SceneSpec(n_points=80, seed=3))
        cam = transform(scene.gt_pose, scene.correspondences.points)
        pix, depth = project(cam, scene.intrinsics)
        np.testing.assert_allclose(pix, scene.correspondences.pixels, atol=1e-9)
        np.testing.assert_allclose(depth, scene.correspondences.pixel_depths, atol=1e-9)

    def test_all_points_in_frame(self):
        for seed in range(5):
            scene = generate_scene(SceneSpec(n_points=60, seed=seed))
            pix = scene.correspondences.pixels
            assert np.all(pix[:, 0] >= 0) and np.all(pix[:, 0] <= scene.spec.width - 1)
            assert np.all(pix[:, 1] >= 0) and np.all(pix[:, 1] <= scene.spec.height - 1)

    def test_noiseless_ir_is_one(self):
        scene = generate_scene(SceneSpec(n_points=50, seed=1))
        assert inlier_ratio(scene.correspondences, scene.gt_pose, scene.intrinsics) == 1.0

    def test_outlier_count_exact(self):
        spec = SceneSpec(n_points=100, seed=5, outlier_fraction=0.37)
        scene = generate_scene(spec)
        assert int(np.sum(~scene.inlier_mask)) == 37

    def test_deterministic(self):
        a = generate_scene(SceneSpec(n_points=40, seed=11, pixel_noise=0.5, outlier_fraction=0.2))
        b = generate_scene(SceneSpec(n_points=40, seed=11, pixel_noise=0.5, outlier_fraction=0.2))
        np.testing.assert_array_equal(a.correspondences.pixels, b.correspondences.pixels)
        np.testing.assert_array_equal(a.cloud.points, b.cloud.points)
        np.testing.assert_array_equal(a.gt_pose.matrix, b.gt_pose.matrix)
        np.testing.assert_array_equal(a.image.features, b.image.features)

    def test_seeds_differ(self):
        a = generate_scene(SceneSpec(n_points=40, seed=1))
        b = generate_scene(SceneSpec(n_points=40, seed=2))
        assert not np.allclose(a.cloud.points, b.cloud.points)

    def test_surface_mode_depth_range(self):
        scene = generate_scene(SceneSpec(n_points=500, seed=7, surface=True))
        d = scene.correspondences.pixel_depths
        lo, hi = scene.spec.depth_range
        assert np.all(d >= lo - 1e-9) and np.all(d <= hi + 1e-9)
        assert len(scene.correspondences) == 500

    def test_feature_noise_keeps_unit_norm(self):
        scene = generate_scene(SceneSpec(n_points=30, seed=9, feature_noise=0.3))
        norms = np.linalg.norm(scene.correspondences.point_features, axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-12)

    def test_bad_spec_rejected(self):
        with pytest.raises(errors.BadDims):
            SceneSpec(n_points=0)
        with pytest.raises(errors.BadDims):
            SceneSpec(outlier_fraction=1.5)
        with pytest.raises(errors.BadDims):
            SceneSpec(depth_range=(3.0, 1.0))


class TestPerturbPose:
    def test_exact_magnitudes(self):
        scene = generate_scene(SceneSpec(seed=2))
        for angle, dist in ((10.0, 0.05), (5.0, 0.1), (0.5, 0.0)):
            out = perturb_pose(scene.gt_pose, angle, dist, seed=4)
            rre, rte = relative_pose_errors(scene.gt_pose, out)
            assert rre == pytest.approx(angle, abs=1e-9)
            assert rte == pytest.approx(dist, abs=1e-12)

    def test_deterministic_per_seed(self):
        scene = generate_scene(SceneSpec(seed=2))
        a = perturb_pose(scene.gt_pose, 5.0, 0.1, seed=8)
        b = perturb_pose(scene.gt_pose, 5.0, 0.1, seed=8)
        c = perturb_pose(scene.gt_pose, 5.0, 0.1, seed=9)
        np.testing.assert_array_equal(a.matrix, b.matrix)
        assert not np.allclose(a.matrix, c.matrix)


def test_substreams_are_independent():
    a = substream(123, "alpha").normal(size=4)
    b = substream(123, "beta").normal(size=4)
    a2 = substream(123, "alpha").normal(size=4)
    np.testing.assert_array_equal(a, a2)
    assert not np.allclose(a, b)
