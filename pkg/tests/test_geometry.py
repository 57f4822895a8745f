import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from handsplat.errors import NonPositiveDepth
from handsplat.geometry import (
    Camera,
    RigidTransform,
    Rotation,
    apply_rigid,
    axis_angle_backward,
    axis_angle_to_matrix,
    axis_angle_to_quat,
    axis_angle_to_rotation,
    matrix_to_axis_angle,
    project,
    project_jacobian,
    quat_normalize,
    quat_to_matrix,
)

from conftest import fd_check

vec3 = st.lists(st.floats(-3.0, 3.0, allow_nan=False), min_size=3, max_size=3).map(np.array)


def test_zero_axis_angle_is_identity():
    np.testing.assert_array_equal(axis_angle_to_rotation([0, 0, 0]).as_matrix(), np.eye(3))


def test_quarter_turn_about_z():
    r = axis_angle_to_rotation([0, 0, np.pi / 2]).as_matrix()
    np.testing.assert_allclose(r, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-15)


def test_axis_angle_round_trip_1000_samples():
    rng = np.random.default_rng(0)
    axis = rng.normal(size=(1000, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    phi = axis * rng.uniform(0, np.pi - 1e-3, (1000, 1))
    r = axis_angle_to_matrix(phi)
    back = axis_angle_to_matrix(matrix_to_axis_angle(r))
    assert np.max(np.abs(back - r)) < 1e-9


def test_small_angles_are_smooth():
    # series branch and closed form agree across the switch-over
    for scale in (1e-9, 1e-7, 1e-6, 9.99e-4, 1.001e-3, 1e-2):
        phi = np.array([0.3, -0.5, 0.8]) * scale
        theta = np.linalg.norm(phi)
        k = phi / theta
        kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
        expected = np.eye(3) + np.sin(theta) * kx + (1 - np.cos(theta)) * kx @ kx
        np.testing.assert_allclose(axis_angle_to_matrix(phi), expected, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(vec3)
def test_rotation_matrix_is_orthonormal(phi):
    r = axis_angle_to_matrix(phi)
    np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-9)
    assert abs(np.linalg.det(r) - 1) < 1e-9


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 1e-3))
def test_quat_normalize_unit_norm(q):
    assert abs(np.linalg.norm(quat_normalize(np.array(q))) - 1) < 1e-9


def test_axis_angle_to_quat_matches_matrix():
    rng = np.random.default_rng(3)
    phi = rng.normal(size=(50, 3))
    np.testing.assert_allclose(quat_to_matrix(axis_angle_to_quat(phi)), axis_angle_to_matrix(phi), atol=1e-12)


def test_axis_angle_backward_fd():
    rng = np.random.default_rng(4)
    for phi in (rng.normal(size=3), np.array([1e-5, -2e-5, 3e-6])):
        w = rng.normal(size=(3, 3))
        f = lambda p: float(np.sum(w * axis_angle_to_matrix(p)))
        assert fd_check(f, phi, axis_angle_backward(phi, w), eps=1e-6, rel=1e-5, floor=1e-9) <= 1


def test_apply_rigid_examples():
    np.testing.assert_array_equal(apply_rigid(RigidTransform.identity(), np.array([1.0, 2, 3])), [1, 2, 3])
    t = RigidTransform(Rotation.identity(), [0, 0, 5])
    np.testing.assert_array_equal(apply_rigid(t, np.zeros(3)), [0, 0, 5])
    t = RigidTransform.from_axis_angle([0, 0, np.pi / 2], [1, 0, 0])
    np.testing.assert_allclose(apply_rigid(t, np.array([1.0, 0, 0])), [1, 1, 0], atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(vec3, vec3, vec3)
def test_rigid_inverse_round_trip(phi, gamma, p):
    t = RigidTransform.from_axis_angle(phi, gamma * 10)
    np.testing.assert_allclose(apply_rigid(t.inverse(), apply_rigid(t, p)), p, atol=1e-9)
    ident = t.compose(t.inverse())
    np.testing.assert_allclose(ident.matrix(), np.eye(4), atol=1e-9)


def test_project_examples():
    cam = Camera(100, 100, 50, 50, 100, 100)
    assert project(cam, [0, 0, 1]) == (50, 50, 1)
    assert project(cam, [1, 0, 2]) == (100, 50, 2)
    with pytest.raises(NonPositiveDepth):
        project(cam, [0, 0, -1])
    with pytest.raises(NonPositiveDepth):
        project(cam, [0, 0, 1e-9])


def test_project_jacobian_fd_100_samples():
    cam = Camera(120, 90, 40, 30, 80, 60)
    rng = np.random.default_rng(5)
    for _ in range(100):
        p = np.array([rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(0.1, 5)])
        jac = project_jacobian(cam, p)
        for row in range(2):
            f = lambda x: project(cam, x)[row]
            assert fd_check(f, p, jac[row], eps=1e-5, rel=1e-5, floor=1e-7) <= 1


def test_camera_validation():
    with pytest.raises(ValueError):
        Camera(0, 1, 0, 0, 10, 10)
    with pytest.raises(ValueError):
        Camera(1, 1, 0, 0, 0, 10)
    cam = Camera(1, 2, 3, 4, 5, 6, RigidTransform.from_axis_angle([0.1, 0.2, 0.3], [1, 2, 3]))
    assert Camera.from_dict(cam.to_dict()).to_dict() == cam.to_dict()
