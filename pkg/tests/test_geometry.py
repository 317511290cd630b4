import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from probpnp import geometry as geo
from probpnp.errors import NonPositiveDepth
from probpnp.synth import SceneParams, gen_scene, random_pose

from conftest import central_diff


def test_project_principal_point(unit_camera):
    assert np.allclose(geo.project(unit_camera, [0.0, 0.0, 2.0]), [0.0, 0.0])


def test_project_hand_value():
    cam = geo.CameraIntrinsics(100.0, 100.0, 50.0, 50.0)
    assert np.allclose(geo.project(cam, [1.0, -1.0, 2.0]), [100.0, 0.0])


@pytest.mark.parametrize("z", [-1.0, 0.0, 1e-5])
def test_project_rejects_points_behind_camera(unit_camera, z):
    with pytest.raises(NonPositiveDepth):
        geo.project(unit_camera, [0.0, 0.0, z])


def test_residual_zero_at_ground_truth(clean_scene):
    sc = clean_scene
    for i in range(sc.corr.n):
        f, r = geo.residual(sc.y_gt, sc.camera, sc.corr, i)
        assert np.abs(r).max() < 1e-10
        assert np.abs(f).max() < 1e-10


def test_residual_is_weighted_elementwise(unit_camera):
    corr = geo.CorrespondenceSet([[0.0, 0.0, 1.0]], [[-1.0, 1.0]], [[2.0, 3.0]])
    pose = geo.Pose6([0.0, 0.0, 0.0])
    f, r = geo.residual(pose, unit_camera, corr, 0)
    assert np.allclose(r, [1.0, -1.0])
    assert np.allclose(f, [2.0, -3.0])


def test_residual_identity_pose_on_axis(unit_camera):
    corr = geo.CorrespondenceSet([[0.0, 0.0, 2.0]], [[0.0, 0.0]], [[1.0, 1.0]])
    _, r = geo.residual(geo.Pose6([0, 0, 0]), unit_camera, corr, 0)
    assert np.allclose(r, 0.0)


def test_translation_block_hand_derivative(unit_camera):
    corr = geo.CorrespondenceSet([[0.0, 0.0, 1.0]], [[0.0, 0.0]], [[1.0, 1.0]])
    J = geo.pose_jacobian(geo.Pose6([0, 0, 0]), unit_camera, corr, 0)
    assert np.allclose(J[:, :3], [[1, 0, 0], [0, 1, 0]])


def _fd_jacobian(pose, camera, corr, i):
    def f(v):
        return geo.residual(geo.pose_from_vector(pose.pose_type, v) if pose.pose_type == "4dof"
                            else _raw_pose6(v), camera, corr, i)[0]
    return central_diff(f, pose.vector, h=1e-6)


class _RawPose6:
    """Pose6 stand-in that keeps an unnormalized quaternion (raw-coordinate differences)."""

    pose_type = "6dof"

    def __init__(self, v):
        self.t = v[:3]
        self.rotation = geo.rotations("6dof", v[None])[0]


def _raw_pose6(v):
    return _RawPose6(np.asarray(v))


@pytest.mark.parametrize("seed", range(100))
def test_pose_jacobian_matches_finite_differences(seed):
    pose_type = "4dof" if seed % 2 else "6dof"
    sc = gen_scene(SceneParams(pose_type=pose_type, n_points=6, noise_sigma=3.0), seed)
    pose = random_pose(pose_type, np.random.default_rng(seed + 500), (3.0, 5.0))
    for i in range(sc.corr.n):
        J = geo.pose_jacobian(pose, sc.camera, sc.corr, i)
        num = _fd_jacobian(pose, sc.camera, sc.corr, i)
        if pose_type == "6dof":
            l = pose.l
            num[:, 3:] = num[:, 3:] @ (np.eye(4) - np.outer(l, l))
        assert np.abs(J - num).max() / np.abs(num).max() < 1e-5


def test_quaternion_block_annihilates_l(noisy_scene):
    if noisy_scene.pose_type != "6dof":
        pytest.skip("quaternion only")
    sc = noisy_scene
    for i in range(sc.corr.n):
        J = geo.pose_jacobian(sc.y_gt, sc.camera, sc.corr, i)
        assert np.abs(J[:, 3:] @ sc.y_gt.l).max() < 1e-12


def test_geodesic_distance_examples():
    a = geo.Pose6([1, 2, 3], [0.3, -0.1, 0.5, 0.2])
    assert geo.geodesic_distance(a, a) == (0.0, 0.0)
    b = geo.Pose6([1, 2, 3], -a.l)
    assert geo.geodesic_distance(a, b)[1] == pytest.approx(0.0, abs=1e-7)
    pos, ang = geo.geodesic_distance(geo.Pose4([0, 0, 1], 3.0), geo.Pose4([0, 0, 1], -3.0))
    assert ang == pytest.approx(2 * np.pi - 6, abs=1e-12)
    assert pos == 0.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=8, max_size=8))
def test_geodesic_distance_symmetric(vals):
    v = np.array(vals)
    if np.linalg.norm(v[:4]) < 1e-3 or np.linalg.norm(v[4:]) < 1e-3:
        return
    a, b = geo.Pose6([0, 0, 1], v[:4]), geo.Pose6([0.1, 0, 1], v[4:])
    assert geo.geodesic_distance(a, b) == pytest.approx(geo.geodesic_distance(b, a), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=4, max_size=4))
def test_quaternion_canonical_unit_norm(q):
    if np.linalg.norm(q) < 1e-6:
        return
    p1 = geo.Pose6([0, 0, 0], q)
    p2 = geo.Pose6([0, 0, 0], -np.array(q))
    assert abs(np.linalg.norm(p1.l) - 1.0) < 1e-9
    assert p1 == p2
    first = p1.l[np.flatnonzero(p1.l)[0]]
    assert first > 0


def test_retract_keeps_unit_quaternion(rng):
    Y = np.column_stack([rng.normal(size=(20, 3)), geo.canonical_quaternion(rng.normal(size=(20, 4)))])
    out = geo.retract("6dof", Y, rng.normal(size=(20, 6)))
    assert np.allclose(np.linalg.norm(out[:, 3:], axis=1), 1.0, atol=1e-12)


def test_tangent_basis_orthonormal_and_orthogonal_to_l(rng):
    Y = np.column_stack([rng.normal(size=(5, 3)), geo.canonical_quaternion(rng.normal(size=(5, 4)))])
    B = geo.tangent_basis("6dof", Y)
    for k in range(5):
        assert np.allclose(B[k].T @ B[k], np.eye(6), atol=1e-12)
        assert np.allclose(Y[k, 3:] @ B[k, 3:], 0.0, atol=1e-12)


def test_yaw_rotated_pose6_matches_pose4():
    p4 = geo.Pose4([0.1, 0.2, 3.0], 0.4)
    c, s = np.cos(0.2), np.sin(0.2)
    p6 = geo.Pose6(p4.t, [c, 0.0, s, 0.0])
    assert np.allclose(p6.rotation, p4.rotation)
    assert np.allclose(geo.yaw_rotated(p6, 0.5).rotation, geo.yaw_rotated(p4, 0.5).rotation)


def test_correspondence_set_validation():
    with pytest.raises(ValueError):
        geo.CorrespondenceSet(np.zeros((3, 3)), np.zeros((2, 2)), np.ones((3, 2)))
    with pytest.raises(ValueError):
        geo.CorrespondenceSet(np.zeros((2, 3)), np.zeros((2, 2)), -np.ones((2, 2)))
