# -*- coding: utf-8 -*-
import numpy as np
import pytest

from depthCore.autodiff import Tensor, check_tensors, precision
from depthCore.geometry import (
    CameraIntrinsics,
    Pose,
    PoseVector,
    backproject,
    compose_pose,
    invert_pose,
    pixel_grid,
    pose_to_matrix,
    pose_vec_to_pose,
    project,
    rotation_to_axis_angle,
    stereo_pose,
    transform_points,
)
from depthCore.scenes import rigid


def _K(width=8, height=6):
    return CameraIntrinsics(fx=5.0, fy=4.0, cx=width / 2, cy=height / 2, width=width, height=height)


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(fx=-1.0, fy=1.0, cx=2.0, cy=2.0, width=4, height=4)
    with pytest.raises(ValueError):
        CameraIntrinsics(fx=1.0, fy=1.0, cx=5.0, cy=2.0, width=4, height=4)


def test_intrinsics_json_round_trip():
    K = CameraIntrinsics.kitti_like(192, 64)
    assert CameraIntrinsics.from_json(K.to_json()) == K
    assert K.fx == pytest.approx(0.58 * 192)
    with pytest.raises(ValueError):
        CameraIntrinsics.from_json('{"fx": 1.0}')


def test_pixel_grid_is_homogeneous():
    g = pixel_grid(4, 3).data
    assert g.shape == (3, 3, 4)
    assert g[0, 2, 3] == 3 and g[1, 2, 3] == 2 and np.all(g[2] == 1)


def test_project_backproject_identity_recovers_pixel_grid():
    K = _K()
    with precision(64):
        depth = Tensor(np.random.default_rng(0).uniform(1.0, 10.0, size=(1, 6, 8)))
        coords = project(transform_points(Pose.identity(), backproject(depth, K)), K).data
    u = (coords[0] + 1) * 0.5 * 7
    v = (coords[1] + 1) * 0.5 * 5
    gu, gv = np.meshgrid(np.arange(8), np.arange(6))
    np.testing.assert_allclose(u, gu, atol=1e-9)
    np.testing.assert_allclose(v, gv, atol=1e-9)


def test_backproject_rejects_non_positive_depth():
    with pytest.raises(ValueError):
        backproject(np.zeros((1, 6, 8)), _K())


def test_translation_along_x_shifts_by_fx_t_over_d():
    K = _K(16, 8)
    d, tx = 4.0, 0.5
    with precision(64):
        T = Pose.from_numpy(np.eye(3), np.array([tx, 0.0, 0.0]))
        coords = project(transform_points(T, backproject(np.full((1, 8, 16), d), K)), K).data
    u = (coords[0] + 1) * 0.5 * 15
    np.testing.assert_allclose(u - np.arange(16)[None, :], K.fx * tx / d, atol=1e-9)


def test_project_clamps_small_z():
    K = _K()
    pts = np.zeros((3, 6, 8))
    pts[2] = -1.0
    assert np.all(np.isfinite(project(Tensor(pts), K).data))


def test_zero_pose_vector_is_identity():
    T = pose_vec_to_pose(np.zeros(6))
    np.testing.assert_allclose(T.rotation.data, np.eye(3), atol=1e-7)
    np.testing.assert_allclose(T.translation.data, 0.0)


def test_rotation_about_z_by_half_pi():
    T = pose_vec_to_pose(np.array([0.0, 0.0, np.pi / 2, 0.0, 0.0, 0.0]))
    np.testing.assert_allclose(T.rotation.data @ np.array([1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-6)


def test_rodrigues_matches_opencv(rng):
    w = rng.normal(size=3) * 0.7
    with precision(64):
        R = pose_vec_to_pose(np.concatenate([w, np.zeros(3)])).rotation.data
    np.testing.assert_allclose(R, rigid(w)[:3, :3], atol=1e-12)


def test_rotation_is_orthonormal(rng):
    with precision(64):
        R = pose_vec_to_pose(np.concatenate([rng.normal(size=3), rng.normal(size=3)])).rotation.data
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_batched_pose_vectors(rng):
    v = rng.normal(size=(3, 6)) * 0.1
    with precision(64):
        T = pose_vec_to_pose(v)
        for i in range(3):
            np.testing.assert_allclose(T.rotation.data[i], pose_vec_to_pose(v[i]).rotation.data)
    assert T.batched


def test_rodrigues_gradient_includes_small_angle_branch(rng):
    with precision(64):
        for escala in (0.5, 1e-9):
            v = Tensor(np.concatenate([rng.normal(size=3) * escala, rng.normal(size=3)]))
            peso = rng.normal(size=(3, 3))
            err = check_tensors(lambda: (pose_vec_to_pose(v).rotation * peso).sum(), [v], eps=1e-6 if escala > 1e-3 else 1e-10, floor=1e-8)
            assert err < 1e-4


def test_invert_and_compose_give_identity(rng):
    with precision(64):
        T = pose_vec_to_pose(np.concatenate([rng.normal(size=3) * 0.3, rng.normal(size=3)]))
        I = compose_pose(T, invert_pose(T))
    np.testing.assert_allclose(pose_to_matrix(I), np.eye(4), atol=1e-12)


def test_compose_applies_right_operand_first():
    a = Pose.from_numpy(np.eye(3), np.array([1.0, 0.0, 0.0]))
    b = Pose.from_matrix(rigid((0.0, 0.0, np.pi / 2)))
    m = pose_to_matrix(compose_pose(a, b))
    np.testing.assert_allclose(m, pose_to_matrix(a) @ pose_to_matrix(b), atol=1e-6)


def test_from_numpy_rejects_non_rotation():
    with pytest.raises(ValueError):
        Pose.from_numpy(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        Pose.from_numpy(np.eye(3) * 2.0, np.zeros(3))


def test_pose_vector_norm_limit():
    with pytest.raises(ValueError):
        PoseVector((np.pi, 0.0, 0.0), (0.0, 0.0, 0.0))
    v = PoseVector((0.1, 0.2, 0.3), (1.0, 2.0, 3.0))
    np.testing.assert_allclose(PoseVector.from_array(v.as_array()).as_array(), v.as_array())


def test_stereo_pose_is_negative_baseline_translation():
    T = stereo_pose(0.5)
    np.testing.assert_allclose(T.translation.data, [-0.5, 0.0, 0.0])
    np.testing.assert_allclose(T.rotation.data, np.eye(3))
    assert stereo_pose(0.5, batch=2).translation.shape == (2, 3)
    with pytest.raises(ValueError):
        stereo_pose(0.0)


@pytest.mark.parametrize("w", [(0.0, 0.0, 0.0), (0.3, -0.2, 0.1), (0.0, np.pi - 1e-8, 0.0), (2.0, 1.0, -0.5)])
def test_rotation_to_axis_angle_inverts_rodrigues(w):
    w = np.asarray(w)
    R = rigid(w)[:3, :3]
    np.testing.assert_allclose(rigid(rotation_to_axis_angle(R))[:3, :3], R, atol=1e-6)
