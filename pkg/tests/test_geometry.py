import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from panokit.geometry import (
    CameraModel,
    DepthMap,
    GeometryError,
    Pose,
    backproject,
    correspondence_field,
    pixel_grid,
    pose_relative,
    project,
    retract_state,
    se3_exp,
    se3_log,
)


def cam100():
    return CameraModel(fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=100, height=100)


def random_pose(rng, rot_scale=1.0, trans_scale=1.0):
    w = rng.normal(size=3)
    n = np.linalg.norm(w)
    if n > 0:
        w = w / n * rng.uniform(0, min(np.pi - 1e-3, rot_scale * np.pi))
    return se3_exp(np.concatenate([w, rng.normal(scale=trans_scale, size=3)]))


class TestSe3Exp:
    def test_zero_is_identity(self):
        p = se3_exp(np.zeros(6))
        assert np.allclose(p.rotation_matrix(), np.eye(3))
        assert np.allclose(p.t, 0.0)

    def test_pure_translation(self):
        p = se3_exp([0, 0, 0, 1.0, 2.0, 3.0])
        assert np.allclose(p.rotation_matrix(), np.eye(3))
        assert np.allclose(p.t, [1.0, 2.0, 3.0])

    def test_half_turn_about_x(self):
        # Rodrigues by hand: R = I + sin(pi) K + (1 - cos(pi)) K^2 = I + 2 K^2
        K = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
        expected = np.eye(3) + 2.0 * (K @ K)
        R = se3_exp([np.pi, 0, 0, 0, 0, 0]).rotation_matrix()
        assert np.allclose(R, expected, atol=1e-12)
        assert np.allclose(R @ R, np.eye(3), atol=1e-12)
        assert np.isclose(np.trace(R), -1.0)

    def test_rejects_non_finite(self):
        with pytest.raises(GeometryError):
            se3_exp([np.nan, 0, 0, 0, 0, 0])

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_log_inverts_exp(self, seed):
        rng = np.random.default_rng(seed)
        w = rng.normal(size=3)
        n = np.linalg.norm(w)
        w = w / n * rng.uniform(0, np.pi - 1e-6) if n > 0 else w
        delta = np.concatenate([w, rng.normal(size=3)])
        assert np.allclose(se3_log(se3_exp(delta)), delta, atol=1e-7)

    def test_log_inverts_exp_small_angle(self):
        delta = np.array([1e-9, -2e-9, 5e-10, 0.3, -0.1, 0.2])
        assert np.allclose(se3_log(se3_exp(delta)), delta, atol=1e-12)


class TestPose:
    def test_compose_inverse_is_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            p = random_pose(rng)
            q = p.compose(p.inverse())
            assert np.allclose(q.rotation_matrix(), np.eye(3), atol=1e-9)
            assert np.allclose(q.t, 0.0, atol=1e-9)

    def test_composition_associative(self):
        rng = np.random.default_rng(1)
        a, b, c = (random_pose(rng) for _ in range(3))
        left = (a.compose(b)).compose(c)
        right = a.compose(b.compose(c))
        assert np.allclose(left.matrix(), right.matrix(), atol=1e-12)

    def test_relative_self_is_identity(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            p = random_pose(rng)
            rel = pose_relative(p, p)
            assert np.allclose(rel.matrix(), np.eye(4), atol=1e-9)

    def test_relative_identity_base(self):
        rng = np.random.default_rng(3)
        p = random_pose(rng)
        rel = pose_relative(Pose.identity(), p)
        assert np.allclose(rel.matrix(), p.matrix(), atol=1e-12)

    def test_relative_translations(self):
        a = se3_exp([0, 0, 0, 1.0, 0, 0])
        b = se3_exp([0, 0, 0, 3.0, 0, 0])
        rel = pose_relative(a, b)
        assert np.allclose(rel.t, [2.0, 0, 0])
        assert np.allclose(rel.rotation_matrix(), np.eye(3))

    def test_quaternion_stays_unit(self):
        rng = np.random.default_rng(4)
        p = Pose.identity()
        for _ in range(500):
            p = p.compose(random_pose(rng, rot_scale=0.1))
        assert abs(np.linalg.norm(p.q) - 1.0) < 1e-9


class TestProjection:
    def test_optical_axis(self):
        uv, ok = project(cam100(), [0.0, 0.0, 10.0])
        assert ok
        assert np.allclose(uv, [50.0, 50.0])

    def test_manual_offset(self):
        uv, ok = project(cam100(), [1.0, 0.0, 10.0])
        assert ok
        assert np.allclose(uv, [60.0, 50.0])

    def test_behind_camera_rejected(self):
        uv, ok = project(cam100(), [0.0, 0.0, -1.0])
        assert not ok
        assert np.all(np.isfinite(uv))

    def test_backproject_principal_point(self):
        assert np.allclose(backproject(cam100(), [50.0, 50.0], 10.0), [0.0, 0.0, 10.0])

    def test_backproject_manual(self):
        assert np.allclose(backproject(cam100(), [60.0, 50.0], 10.0), [1.0, 0.0, 10.0])

    def test_backproject_rejects_nonpositive_depth(self):
        with pytest.raises(GeometryError):
            backproject(cam100(), [50.0, 50.0], 0.0)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_project_backproject_roundtrip(self, seed):
        rng = np.random.default_rng(seed)
        cam = cam100()
        px = np.array([rng.uniform(0, cam.width - 1), rng.uniform(0, cam.height - 1)])
        d = rng.uniform(0.1, 1e4)
        uv, ok = project(cam, backproject(cam, px, d))
        assert ok
        assert np.allclose(uv, px, atol=1e-9)

    def test_camera_invariants(self):
        with pytest.raises(GeometryError):
            CameraModel(fx=-1, fy=1, cx=0, cy=0, width=10, height=10)
        with pytest.raises(GeometryError):
            CameraModel(fx=1, fy=1, cx=20, cy=0, width=10, height=10)


class TestCorrespondenceField:
    def test_identity_motion_is_grid(self):
        cam = cam100()
        depth = DepthMap.from_values(np.full((100, 100), 5.0))
        uv, vis = correspondence_field(cam, Pose.identity(), depth)
        assert np.all(vis)
        assert np.array_equal(uv, pixel_grid(100, 100))

    def test_single_pixel_hand_reprojection(self):
        cam = cam100()
        depth = DepthMap.from_values(np.full((100, 100), 10.0))
        uv, vis = correspondence_field(cam, se3_exp([0, 0, 0, 0.1, 0, 0]), depth)
        assert vis[50, 60]
        assert np.allclose(uv[50, 60], [61.0, 50.0])

    def test_invalid_depth_masks_visibility(self):
        cam = cam100()
        vals = np.full((100, 100), 5.0)
        vals[3, 7] = np.nan
        depth = DepthMap.from_values(vals)
        uv, vis = correspondence_field(cam, Pose.identity(), depth)
        assert not vis[3, 7]
        assert vis[0, 0]

    def test_dimension_mismatch(self):
        cam = cam100()
        depth = DepthMap.from_values(np.full((50, 100), 5.0))
        with pytest.raises(GeometryError):
            correspondence_field(cam, Pose.identity(), depth)

    def test_forward_motion_moves_pixels_outward(self):
        rng = np.random.default_rng(7)
        cam = cam100()
        depth = DepthMap.from_values(rng.uniform(4.0, 9.0, size=(100, 100)))
        # camera advances toward the scene: points get closer in frame j
        uv, vis = correspondence_field(cam, se3_exp([0, 0, 0, 0, 0, -0.5]), depth)
        grid = pixel_grid(100, 100)
        center = np.array([cam.cx, cam.cy])
        r0 = np.linalg.norm(grid - center, axis=-1)
        r1 = np.linalg.norm(uv - center, axis=-1)
        off_axis = (r0 > 1e-9) & vis
        assert np.all(r1[off_axis] > r0[off_axis])
        # motion is radial: displacement parallel to the offset from center
        d0 = grid - center
        cross = d0[..., 0] * (uv - center)[..., 1] - d0[..., 1] * (uv - center)[..., 0]
        assert np.allclose(cross[off_axis], 0.0, atol=1e-9)


class TestRetractState:
    def test_zero_increment(self):
        rng = np.random.default_rng(8)
        pose = random_pose(rng)
        theta = rng.normal(size=(4, 4))
        new_pose, new_theta = retract_state(pose, np.zeros(6), theta, np.zeros((4, 4)))
        assert np.allclose(new_pose.matrix(), pose.matrix(), atol=1e-12)
        assert np.array_equal(new_theta, theta)

    def test_pure_translation_update(self):
        new_pose, _ = retract_state(
            Pose.identity(), [0, 0, 0, 1.0, 2.0, 3.0], np.zeros((2, 2)), np.zeros((2, 2))
        )
        assert np.allclose(new_pose.t, [1.0, 2.0, 3.0])
        assert np.allclose(new_pose.rotation_matrix(), np.eye(3))

    def test_additive_rule(self):
        _, theta = retract_state(Pose.identity(), np.zeros(6), np.array([[5.0]]), np.array([[-0.5]]))
        assert np.allclose(theta, [[4.5]])

    def test_depth_below_floor_marked_invalid(self):
        depth = DepthMap.from_values(np.array([[1.0, 2.0], [3.0, 4.0]]))
        _, out = retract_state(
            Pose.identity(), np.zeros(6), depth, np.array([[-1.0, 0.0], [0.0, 0.0]])
        )
        assert not out.valid[0, 0]
        assert out.valid[0, 1] and out.valid[1, 0] and out.valid[1, 1]
        assert np.allclose(out.values[0, 1], 2.0)

    def test_shape_mismatch(self):
        with pytest.raises(GeometryError):
            retract_state(Pose.identity(), np.zeros(6), np.zeros((2, 2)), np.zeros((3, 3)))


def test_pixel_grid_convention():
    g = pixel_grid(3, 4)
    assert g.shape == (3, 4, 2)
    assert np.array_equal(g[1, 2], [2.0, 1.0])
