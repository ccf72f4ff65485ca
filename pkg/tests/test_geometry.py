import json

import numpy as np
import pytest

from diffreg import errors
from diffreg.geometry import (
    CameraIntrinsics,
    Pose,
    axis_angle_from_rotation,
    compose,
    inverse,
    load_point_cloud,
    load_pose,
    pose_from_tangent,
    pose_to_tangent,
    project,
    rotation_from_axis_angle,
    save_point_cloud,
    save_pose,
    so3_hat,
    so3_right_jacobian,
    transform,
    unproject,
)

K = CameraIntrinsics(fx=100.0, fy=100.0, cx=64.0, cy=48.0, width=128, height=96)


def random_rotation(rng, max_angle=np.pi * 0.95):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return rotation_from_axis_angle(axis * rng.uniform(0.0, max_angle))


def random_pose(rng, max_angle=np.pi * 0.95, max_t=2.0):
    return Pose(random_rotation(rng, max_angle), rng.uniform(-max_t, max_t, size=3))


class TestRotations:
    def test_quarter_turn_about_z(self):
        # hand oracle: 90 deg about +z sends x->y, y->-x
        R = rotation_from_axis_angle([0.0, 0.0, np.pi / 2])
        expected = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        np.testing.assert_allclose(R, expected, atol=1e-15)

    def test_rotation_is_orthonormal(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            R = random_rotation(rng)
            assert np.linalg.norm(R.T @ R - np.eye(3)) < 1e-12
            assert abs(np.linalg.det(R) - 1.0) < 1e-12

    def test_log_exp_roundtrip(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            w = rng.normal(size=3)
            w *= rng.uniform(0.0, np.pi * 0.999) / np.linalg.norm(w)
            w2 = axis_angle_from_rotation(rotation_from_axis_angle(w))
            assert np.linalg.norm(w2 - w) < 1e-9

    def test_log_near_zero_and_near_pi(self):
        for scale in (1e-12, 1e-9, 1e-7):
            w = np.array([1.0, -2.0, 0.5])
            w *= scale / np.linalg.norm(w)
            assert np.linalg.norm(axis_angle_from_rotation(rotation_from_axis_angle(w)) - w) < 1e-12
        # just under pi, both axis signs
        for sign in (1.0, -1.0):
            w = sign * np.array([0.6, -0.48, 0.64])
            w *= (np.pi - 1e-9) / np.linalg.norm(w)
            R = rotation_from_axis_angle(w)
            w2 = axis_angle_from_rotation(R)
            np.testing.assert_allclose(rotation_from_axis_angle(w2), R, atol=1e-9)

    def test_rotated_point_jacobian_matches_fd(self):
        # d(R(w) p)/dw = -R [p]x J_r(w), checked against central differences
        rng = np.random.default_rng(3)
        for _ in range(20):
            w = rng.normal(size=3) * 0.8
            p = rng.normal(size=3)
            R = rotation_from_axis_angle(w)
            J_analytic = -R @ so3_hat(p) @ so3_right_jacobian(w)
            h = 1e-6
            J_fd = np.zeros((3, 3))
            for j in range(3):
                e = np.zeros(3)
                e[j] = h
                J_fd[:, j] = (
                    rotation_from_axis_angle(w + e) @ p
                    - rotation_from_axis_angle(w - e) @ p
                ) / (2 * h)
            np.testing.assert_allclose(J_analytic, J_fd, atol=1e-8)


class TestPose:
    def test_tangent_roundtrip(self):
        rng = np.random.default_rng(13)
        for _ in range(1000):
            w = rng.normal(size=3)
            w *= rng.uniform(0.0, np.pi * 0.999) / np.linalg.norm(w)
            v = np.concatenate([w, rng.uniform(-3.0, 3.0, size=3)])
            pose = pose_from_tangent(v)
            assert not pose.tangent_wrapped
            assert np.linalg.norm(pose_to_tangent(pose) - v) < 1e-9

    def test_large_angle_wraps_to_canonical(self):
        w = np.array([0.0, 0.0, 1.0]) * (np.pi + 0.3)
        pose = pose_from_tangent(np.concatenate([w, np.zeros(3)]))
        assert pose.tangent_wrapped
        angle = np.linalg.norm(pose.tangent[:3])
        assert angle <= np.pi + 1e-12
        np.testing.assert_allclose(pose.rotation, rotation_from_axis_angle(w), atol=1e-12)

    def test_compose_matches_sequential_application(self):
        rng = np.random.default_rng(17)
        for _ in range(50):
            a, b = random_pose(rng), random_pose(rng)
            pts = rng.normal(size=(20, 3))
            np.testing.assert_allclose(
                transform(compose(a, b), pts),
                transform(a, transform(b, pts)),
                atol=1e-9,
            )

    def test_inverse(self):
        rng = np.random.default_rng(19)
        pose = random_pose(rng)
        both = compose(pose, inverse(pose))
        np.testing.assert_allclose(both.matrix, np.eye(4), atol=1e-12)

    def test_transform_preserves_distances(self):
        rng = np.random.default_rng(23)
        pose = random_pose(rng)
        pts = rng.normal(size=(30, 3))
        out = transform(pose, pts)
        d_in = np.linalg.norm(pts[:, None] - pts[None, :], axis=-1)
        d_out = np.linalg.norm(out[:, None] - out[None, :], axis=-1)
        np.testing.assert_allclose(d_in, d_out, atol=1e-9)

    def test_rejects_non_orthonormal_rotation(self):
        R = np.eye(3)
        R[0, 0] = 1.0 + 1e-6
        with pytest.raises(errors.DegenerateConfiguration):
            Pose(R, np.zeros(3))

    def test_rejects_reflection(self):
        R = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(errors.DegenerateConfiguration):
            Pose(R, np.zeros(3))

    def test_pose_arrays_immutable(self):
        pose = Pose.identity()
        with pytest.raises(ValueError):
            pose.rotation[0, 0] = 2.0


class TestProjection:
    def test_hand_computed_projection(self):
        # (0.1, -0.2, 2.0): u = 100*0.05 + 64 = 69, v = 100*(-0.1) + 48 = 38
        pix, depth = project(np.array([0.1, -0.2, 2.0]), K)
        np.testing.assert_allclose(pix, [69.0, 38.0], atol=1e-12)
        assert depth == 2.0

    def test_principal_ray(self):
        pix, _ = project(np.array([0.0, 0.0, 1.5]), K)
        np.testing.assert_allclose(pix, [64.0, 48.0], atol=1e-12)

    def test_nonpositive_depth_raises(self):
        for z in (0.0, -1.0, 1e-10, 1e-9):
            with pytest.raises(errors.NonPositiveDepth):
                project(np.array([0.0, 0.0, z]), K)

    def test_project_unproject_roundtrip(self):
        rng = np.random.default_rng(29)
        pix = np.stack(
            [rng.uniform(0, K.width - 1, 1000), rng.uniform(0, K.height - 1, 1000)],
            axis=1,
        )
        depth = rng.uniform(0.2, 10.0, 1000)
        pix2, depth2 = project(unproject(pix, depth, K), K)
        assert np.max(np.abs(pix2 - pix)) < 1e-9
        assert np.max(np.abs(depth2 - depth)) < 1e-9

    def test_unproject_project_roundtrip(self):
        rng = np.random.default_rng(31)
        pts = np.stack(
            [
                rng.uniform(-1, 1, 500),
                rng.uniform(-1, 1, 500),
                rng.uniform(0.5, 5.0, 500),
            ],
            axis=1,
        )
        pix, depth = project(pts, K)
        np.testing.assert_allclose(unproject(pix, depth, K), pts, atol=1e-9)

    def test_batch_and_single_agree(self):
        pts = np.array([[0.3, 0.2, 1.0], [-0.1, 0.0, 2.0]])
        batch_pix, batch_d = project(pts, K)
        for i in range(2):
            pix, d = project(pts[i], K)
            np.testing.assert_allclose(pix, batch_pix[i])
            assert d == batch_d[i]


class TestFileFormats:
    def test_point_cloud_roundtrip_exact(self, tmp_path):
        rng = np.random.default_rng(37)
        pts = rng.normal(size=(40, 3))
        feats = rng.normal(size=(40, 8))
        path = tmp_path / "cloud.txt"
        save_point_cloud(path, pts, feats)
        pts2, feats2 = load_point_cloud(path)
        # %.17g round-trips float64 exactly
        np.testing.assert_array_equal(pts2, pts)
        np.testing.assert_array_equal(feats2, feats)

    def test_point_cloud_without_features(self, tmp_path):
        pts = np.arange(12.0).reshape(4, 3)
        path = tmp_path / "cloud.txt"
        save_point_cloud(path, pts)
        pts2, feats2 = load_point_cloud(path)
        np.testing.assert_array_equal(pts2, pts)
        assert feats2 is None

    def test_point_cloud_rejects_short_rows(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("1.0 2.0\n3.0 4.0\n")
        with pytest.raises(errors.FormatError):
            load_point_cloud(path)

    def test_pose_json_roundtrip(self, tmp_path):
        rng = np.random.default_rng(41)
        pose = random_pose(rng)
        path = tmp_path / "pose.json"
        save_pose(path, pose)
        d = json.loads(path.read_text())
        assert len(d["matrix"]) == 16
        pose2 = load_pose(path)
        np.testing.assert_allclose(pose2.matrix, pose.matrix, atol=1e-15)

    def test_intrinsics_json_roundtrip(self, tmp_path):
        path = tmp_path / "K.json"
        K.save(path)
        K2 = CameraIntrinsics.load(path)
        assert K2 == K

    def test_intrinsics_validation(self):
        with pytest.raises(errors.BadDims):
            CameraIntrinsics(fx=-1.0, fy=1.0, cx=0.0, cy=0.0, width=10, height=10)
        with pytest.raises(errors.BadDims):
            CameraIntrinsics(fx=1.0, fy=1.0, cx=0.0, cy=0.0, width=0, height=10)
