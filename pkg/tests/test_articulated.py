from collections import Counter

import numpy as np
import pytest

from handsplat.articulated import (
    FINGERS,
    N_POSE,
    N_SHAPE,
    forward_kinematics,
    gaussians_from_mesh,
    hand_canonical_mesh,
    lbs_backward,
    make_box,
    make_cylinder,
    make_sphere,
    make_toy_hand,
    pose_points,
    pose_points_backward,
    sample_surface,
    surface_pattern,
    to_camera,
    to_camera_gaussians_backward,
)
from handsplat.errors import DimensionMismatch, StateMismatch
from handsplat.gaussians import GaussianSet
from handsplat.geometry import RigidTransform, axis_angle_to_matrix, quat_to_matrix

from conftest import fd_check


@pytest.fixture(scope="module")
def hand():
    return make_toy_hand("r")


def directed_edges(faces):
    return Counter((int(a), int(b)) for f in faces for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])))


@pytest.mark.parametrize("make", [lambda: make_toy_hand("r"), lambda: make_toy_hand("l"), make_sphere, make_cylinder, make_box])
def test_meshes_are_closed_and_consistently_wound(make):
    t = make()
    t.validate()
    edges = directed_edges(t.faces)
    assert all(c == 1 for c in edges.values())
    assert all(edges.get((b, a)) == 1 for a, b in edges)
    # outward orientation: positive signed volume
    v = t.vertices[t.faces]
    volume = np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6
    assert volume > 0


def test_toy_hand_structure(hand):
    assert hand.n_joints == 16
    assert 3 * (hand.n_joints - 1) == N_POSE
    assert hand.shape_basis.shape == (hand.n_vertices, 3, N_SHAPE)
    assert 500 <= hand.n_vertices <= 700
    np.testing.assert_allclose(hand.skin_weights.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(hand.skin_weights >= 0)
    assert np.all((hand.skin_weights > 0).sum(axis=1) <= 4)
    assert not np.any(hand.shape_basis[:, :, 1 + len(FINGERS):])
    assert hand.parents[0] == -1
    assert all(0 <= hand.parents[j] < j for j in range(1, hand.n_joints))


def test_toy_hand_deterministic_and_mirrored(hand):
    again = make_toy_hand("r")
    np.testing.assert_array_equal(hand.vertices, again.vertices)
    np.testing.assert_array_equal(hand.faces, again.faces)
    left = make_toy_hand("l")
    np.testing.assert_array_equal(left.vertices, hand.vertices * [-1, 1, 1])
    np.testing.assert_array_equal(left.faces, hand.faces[:, ::-1])


def test_rest_pose_is_identity(hand):
    mesh = hand_canonical_mesh(hand, np.zeros(N_POSE), np.zeros(N_SHAPE))
    np.testing.assert_allclose(mesh.vertices, hand.vertices, atol=1e-12)


def test_linear_shape_blend(hand):
    beta = np.zeros(N_SHAPE)
    beta[0] = 0.1
    mesh = hand_canonical_mesh(hand, np.zeros(N_POSE), beta)
    np.testing.assert_allclose(mesh.vertices, hand.vertices + 0.1 * hand.shape_basis[:, :, 0], atol=1e-12)


def test_single_joint_quarter_bend(hand):
    joint = 1  # proximal joint of the first finger
    theta = np.zeros(N_POSE)
    axis = np.array([0.0, 0.0, 1.0])
    theta[3 * (joint - 1):3 * joint] = axis * np.pi / 2
    mesh = hand_canonical_mesh(hand, theta, np.zeros(N_SHAPE))
    owned = hand.skin_weights[:, joint] == 1.0
    assert owned.sum() > 0
    r = axis_angle_to_matrix(axis * np.pi / 2)
    pivot = hand.joints[joint]
    expected = (hand.vertices[owned] - pivot) @ r.T + pivot
    np.testing.assert_allclose(mesh.vertices[owned], expected, atol=1e-12)


def test_dimension_checks(hand):
    with pytest.raises(DimensionMismatch):
        hand_canonical_mesh(hand, np.zeros(44), np.zeros(N_SHAPE))
    with pytest.raises(DimensionMismatch):
        hand_canonical_mesh(hand, np.zeros(N_POSE), np.zeros(9))


def test_to_camera_examples():
    pts = np.array([[1.0, 0, 0], [0.3, -2, 5]])
    np.testing.assert_array_equal(to_camera(pts, np.zeros(3), np.zeros(3)), pts)
    np.testing.assert_array_equal(to_camera(pts, np.zeros(3), [0, 0, 30]), pts + [0, 0, 30])
    np.testing.assert_allclose(to_camera(pts[:1], [0, 0, np.pi / 2], [1, 0, 0]), [[1, 1, 0]], atol=1e-15)


def test_to_camera_gaussians_left_composes_rotation():
    rng = np.random.default_rng(0)
    g = GaussianSet(rng.normal(size=(5, 3)), rng.normal(size=(5, 4)), rng.normal(size=(5, 3)), rng.normal(size=5), rng.random((5, 3)))
    g = g.with_(rotations=g.rotations / np.linalg.norm(g.rotations, axis=1, keepdims=True))
    phi = np.array([0.2, -0.4, 0.9])
    out = to_camera(g, phi, [1, 2, 3])
    r = axis_angle_to_matrix(phi)
    np.testing.assert_allclose(quat_to_matrix(out.rotations), r @ quat_to_matrix(g.rotations), atol=1e-12)
    np.testing.assert_array_equal(out.log_scales, g.log_scales)


def test_rigid_equivariance_at_rest(hand):
    phi, gamma = np.array([0.3, -0.2, 1.1]), np.array([2.0, -1.0, 40.0])
    mesh = hand_canonical_mesh(hand, np.zeros(N_POSE), np.zeros(N_SHAPE))
    placed = to_camera(mesh, phi, gamma)
    expected = RigidTransform.from_axis_angle(phi, gamma).apply(hand.vertices)
    np.testing.assert_allclose(placed.vertices, expected, atol=1e-9)


def test_single_joint_weights_are_rigid(hand):
    rng = np.random.default_rng(1)
    theta = rng.normal(0, 0.4, N_POSE)
    a_rot, a_trans, _ = forward_kinematics(hand, theta, np.zeros(N_SHAPE))
    w = np.zeros((hand.n_vertices, hand.n_joints))
    w[:, 7] = 1.0
    posed, _ = pose_points(hand, hand.vertices, w, np.arange(hand.n_vertices), theta, np.zeros(N_SHAPE), np.zeros(3), np.zeros(3))
    np.testing.assert_allclose(posed, hand.vertices @ a_rot[7].T + a_trans[7], atol=1e-12)


def test_lbs_backward_zero_and_translation(hand):
    rng = np.random.default_rng(2)
    theta, beta = rng.normal(0, 0.3, N_POSE), rng.normal(0, 0.1, N_SHAPE)
    mesh = hand_canonical_mesh(hand, theta, beta)
    d_theta, d_beta, d_phi, d_gamma, d_vert = lbs_backward(mesh, np.zeros_like(mesh.vertices))
    for g in (d_theta, d_beta, d_phi, d_gamma, d_vert):
        assert not np.any(g)
    cot = rng.normal(size=mesh.vertices.shape)
    placed = to_camera(mesh, [0.1, 0.2, 0.3], [1, 2, 3])
    np.testing.assert_allclose(lbs_backward(placed, cot)[3], cot.sum(axis=0))
    with pytest.raises(StateMismatch):
        lbs_backward(type(mesh)(mesh.vertices, mesh.faces, None), cot)


def test_lbs_theta_gradient_fd(hand):
    rng = np.random.default_rng(3)
    theta, beta = rng.normal(0, 0.3, N_POSE), rng.normal(0, 0.1, N_SHAPE)
    mesh = hand_canonical_mesh(hand, theta, beta)
    d_theta, d_beta, *_ = lbs_backward(mesh, 2 * mesh.vertices)

    def loss_theta(t):
        return float(np.sum(hand_canonical_mesh(hand, t, beta).vertices ** 2))

    def loss_beta(b):
        return float(np.sum(hand_canonical_mesh(hand, theta, b).vertices ** 2))

    assert fd_check(loss_theta, theta, d_theta, eps=1e-5) <= 1
    assert fd_check(loss_beta, beta, d_beta, eps=1e-5) <= 1


def test_pose_points_full_chain_fd(hand):
    rng = np.random.default_rng(4)
    n = 32
    idx = rng.choice(hand.n_vertices, n, replace=False)
    pts = hand.vertices[idx] + rng.normal(0, 0.2, (n, 3))
    logits = rng.normal(size=(n, hand.n_joints + 1))
    w = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    args = {"theta": rng.normal(0, 0.3, N_POSE), "beta": rng.normal(0, 0.1, N_SHAPE),
            "Phi": rng.normal(0, 0.5, 3), "Gamma": rng.normal(0, 2, 3), "weights": w, "points": pts}
    cot = rng.normal(size=(n, 3))

    def run(**kw):
        a = {**args, **kw}
        return pose_points(hand, a["points"], a["weights"], idx, a["theta"], a["beta"], a["Phi"], a["Gamma"])

    posed, cache = run()
    grads = pose_points_backward(cache, cot)
    for key in args:
        f = lambda v, key=key: float(np.sum(cot * run(**{key: v})[0]))
        assert fd_check(f, args[key], grads[key], eps=1e-5) <= 1, key


def test_to_camera_gaussians_backward_fd():
    rng = np.random.default_rng(5)
    g = GaussianSet(rng.normal(size=(6, 3)), rng.normal(size=(6, 4)), np.zeros((6, 3)), np.zeros(6), np.zeros((6, 3)))
    phi, gamma = rng.normal(size=3), rng.normal(size=3)
    wc, wq = rng.normal(size=(6, 3)), rng.normal(size=(6, 4))

    def loss(g2, p, gm):
        out = to_camera(g2, p, gm)
        return float(np.sum(wc * out.centers) + np.sum(wq * out.rotations))

    dc, dq, dphi, dgamma = to_camera_gaussians_backward(g, phi, wc, wq)
    assert fd_check(lambda c: loss(g.with_(centers=c), phi, gamma), g.centers, dc) <= 1
    assert fd_check(lambda q: loss(g.with_(rotations=q), phi, gamma), g.rotations, dq) <= 1
    assert fd_check(lambda p: loss(g, p, gamma), phi, dphi) <= 1
    assert fd_check(lambda gm: loss(g, phi, gm), gamma, dgamma) <= 1


def test_splat_initialization(hand):
    g = gaussians_from_mesh(hand.vertices, hand.faces)
    assert len(g) == hand.n_vertices
    np.testing.assert_allclose(g.scales, hand.mean_edge_length() / 2)
    np.testing.assert_allclose(g.opacities, 0.5)
    np.testing.assert_allclose(g.colors, 0.5)


def test_surface_sampling_deterministic(hand):
    a = sample_surface(hand.vertices, hand.faces, surface_pattern(hand.vertices, hand.faces, 500, seed=3))
    b = sample_surface(hand.vertices, hand.faces, surface_pattern(hand.vertices, hand.faces, 500, seed=3))
    np.testing.assert_array_equal(a, b)
    c = sample_surface(hand.vertices, hand.faces, surface_pattern(hand.vertices, hand.faces, 500, seed=4))
    assert not np.array_equal(a, c)
