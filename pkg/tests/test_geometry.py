import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dynsplat import geometry as G


def unit_quats():
    return (
        st.tuples(*[st.floats(-1, 1, allow_nan=False) for _ in range(4)])
        .map(np.array)
        .filter(lambda q: np.linalg.norm(q) > 1e-3)
        .map(G.quat_normalize)
    )


def tangents(max_rot=3.0, max_trans=2.0):
    return st.tuples(
        *[st.floats(-max_rot / 2, max_rot / 2, allow_nan=False) for _ in range(3)],
        *[st.floats(-max_trans, max_trans, allow_nan=False) for _ in range(3)],
    ).map(np.array)


K = G.Intrinsics(100.0, 100.0, 50.0, 50.0, 101, 101)


class TestQuaternions:
    @settings(max_examples=60, deadline=None)
    @given(unit_quats())
    def test_matrix_round_trip(self, q):
        m = G.quat_to_matrix(q)
        assert np.allclose(m @ m.T, np.eye(3), atol=1e-12)
        back = G.matrix_to_quat(m)
        # q and -q encode the same rotation
        assert min(np.abs(back - q).max(), np.abs(back + q).max()) < 1e-9

    @settings(max_examples=60, deadline=None)
    @given(unit_quats(), unit_quats())
    def test_multiply_matches_matrix_product(self, a, b):
        lhs = G.quat_to_matrix(G.quat_multiply(a, b))
        rhs = G.quat_to_matrix(a) @ G.quat_to_matrix(b)
        assert np.allclose(lhs, rhs, atol=1e-12)

    def test_rotate_matches_matrix(self, rng):
        for _ in range(20):
            q = G.quat_normalize(rng.normal(size=4))
            v = rng.normal(size=(5, 3))
            assert np.allclose(G.quat_rotate(q, v), v @ G.quat_to_matrix(q).T, atol=1e-12)

    def test_axis_angle(self):
        q = G.quat_from_axis_angle([0, 0, 1], math.pi / 2)
        assert np.allclose(G.quat_rotate(q, [1, 0, 0]), [0, 1, 0], atol=1e-12)
        assert abs(G.quat_angle(q) - math.pi / 2) < 1e-12

    def test_zero_quat_rejected(self):
        with pytest.raises(G.GeometryError):
            G.quat_normalize(np.zeros(4))


class TestSE3:
    @settings(max_examples=60, deadline=None)
    @given(tangents())
    def test_exp_log_round_trip(self, delta):
        tf = G.se3_exp(delta)
        back = G.se3_log(tf)
        assert np.allclose(back, delta, atol=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(tangents(), tangents(), tangents())
    def test_compose_associative(self, d1, d2, d3):
        a, b, c = (G.se3_exp(d) for d in (d1, d2, d3))
        lhs = a.compose(b).compose(c)
        rhs = a.compose(b.compose(c))
        assert lhs.almost_equal(rhs, 1e-9, 1e-9)

    def test_inverse(self, rng):
        for _ in range(20):
            tf = G.se3_exp(rng.normal(size=6))
            ident = tf.compose(tf.inverse())
            assert ident.almost_equal(G.RigidTransform.identity(), 1e-10, 1e-10)
            assert np.allclose(tf.matrix() @ tf.inverse().matrix(), np.eye(4), atol=1e-12)

    def test_apply_matches_matrix(self, rng):
        tf = G.se3_exp(rng.normal(size=6))
        pts = rng.normal(size=(7, 3))
        hom = np.concatenate([pts, np.ones((7, 1))], axis=1)
        assert np.allclose(tf.apply(pts), (hom @ tf.matrix().T)[:, :3], atol=1e-12)

    def test_scaled_halves_compose(self, rng):
        tf = G.se3_exp(rng.normal(size=6) * 0.5)
        half = tf.scaled(0.5)
        assert half.compose(half).almost_equal(tf, 1e-9, 1e-9)

    def test_pure_translation_step_is_exact(self):
        pose = G.CameraPose(G.quat_from_axis_angle([0, 1, 0], 0.3), [1.0, 2.0, 3.0])
        eps = 1e-3
        stepped = G.se3_step(pose, np.array([0, 0, 0, 0, 0, eps]))
        assert np.allclose(stepped.t, pose.t + [0, 0, eps], atol=1e-15)
        assert np.allclose(stepped.q, pose.q, atol=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(tangents(max_rot=2.8))
    def test_step_forward_back(self, delta):
        pose = G.CameraPose(G.quat_from_axis_angle([1, 2, 3], 0.7), [0.4, -0.2, 1.0])
        there = G.se3_step(pose, delta)
        back = G.se3_step(there, -delta)
        assert back.almost_equal(pose, 1e-9, 1e-9)

    def test_step_clamps_large_rotation(self):
        G.reset_se3_step_clamp_count()
        pose = G.CameraPose()
        delta = np.array([4.0, 0, 0, 0, 0, 0])
        stepped = G.se3_step(pose, delta)
        assert G.se3_step_clamp_count() == 1
        assert abs(stepped.rotation_angle() - math.pi) < 1e-9

    def test_step_rejects_bad_shape(self):
        with pytest.raises(G.GeometryError):
            G.se3_step(G.CameraPose(), np.zeros(5))

    def test_step_preserves_pose_type(self):
        assert isinstance(G.se3_step(G.CameraPose(), np.zeros(6)), G.CameraPose)
        assert isinstance(G.se3_step(G.RigidTransform(), np.zeros(6)), G.RigidTransform)


class TestPinhole:
    def test_on_axis_point_hits_principal_point(self):
        assert np.allclose(G.project(np.array([0.0, 0.0, 2.0]), K), [50.0, 50.0])

    def test_behind_camera_raises(self):
        with pytest.raises(G.BehindCameraError):
            G.project(np.array([0.1, 0.1, -0.5]), K)
        with pytest.raises(G.BehindCameraError):
            G.project(np.array([0.1, 0.1, 0.0]), K)

    def test_bad_depth_raises(self):
        with pytest.raises(G.InvalidDepthError):
            G.back_project((50, 50), 0.0, K)
        with pytest.raises(G.InvalidDepthError):
            G.back_project((50, 50), float("nan"), K)

    @settings(max_examples=60, deadline=None)
    @given(
        st.floats(-0.5, 0.5),
        st.floats(-0.5, 0.5),
        st.floats(0.1, 10.0),
    )
    def test_round_trip(self, x, y, z):
        p = np.array([x * z, y * z, z])
        uv = G.project(p, K)
        back = G.back_project(uv, z, K)
        assert np.allclose(back, p, atol=1e-9)

    def test_batch_matches_scalar(self, rng):
        pts = rng.uniform([-1, -1, 0.2], [1, 1, 5.0], size=(50, 3))
        uv, valid = G.project_points(pts, K)
        assert valid.all()
        for i in range(50):
            assert np.allclose(uv[i], G.project(pts[i], K), atol=1e-12)

    def test_batch_flags_behind(self):
        uv, valid = G.project_points(np.array([[0, 0, 1.0], [0, 0, -1.0]]), K)
        assert valid.tolist() == [True, False]

    def test_back_project_map(self, rng):
        depth = rng.uniform(0.5, 3.0, size=(8, 10))
        depth[2, 3] = 0.0
        Ks = G.Intrinsics(40.0, 42.0, 4.5, 3.5, 10, 8)
        pts, valid = G.back_project_map(depth, Ks)
        assert not valid[2, 3] and valid.sum() == 79
        assert np.allclose(pts[5, 7], G.back_project((7, 5), depth[5, 7], Ks), atol=1e-12)

    def test_intrinsics_validation(self):
        with pytest.raises(G.GeometryError):
            G.Intrinsics(-1.0, 1.0, 0.0, 0.0, 10, 10)
        with pytest.raises(G.GeometryError):
            G.Intrinsics(1.0, 1.0, 0.0, 0.0, 0, 10)


class TestCameraPose:
    def test_world_to_camera_inverts_apply(self, rng):
        pose = G.CameraPose(G.quat_normalize(rng.normal(size=4)), rng.normal(size=3))
        pts = rng.normal(size=(6, 3))
        assert np.allclose(pose.world_to_camera(pose.apply(pts)), pts, atol=1e-12)

    def test_types_do_not_mix_silently(self):
        pose = G.CameraPose()
        delta = G.RigidTransform()
        # composition is explicit about the result type: it is the caller's
        composed = delta.compose(pose)
        assert isinstance(composed, G.RigidTransform)
