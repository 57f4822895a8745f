import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from handsplat.articulated import make_box
from handsplat.errors import EmptyCloud, FrameCountMismatch, MissingAgent
from handsplat.geometry import axis_angle_to_matrix
from handsplat.metrics import cd_h, chamfer, evaluate, f_score, nearest_sq, to_hand_frame
from handsplat.scene import AgentParams


def brute_sq(a, b):
    d = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d).min(axis=1)


def brute_chamfer(a, b):
    return 0.5 * (brute_sq(a, b).mean() + brute_sq(b, a).mean())


def brute_f(a, b, tau):
    p = np.mean(brute_sq(a, b) <= tau * tau)
    r = np.mean(brute_sq(b, a) <= tau * tau)
    return 0.0 if p + r == 0 else 200.0 * p * r / (p + r)


clouds = st.integers(1, 64).flatmap(
    lambda n: st.lists(st.tuples(*[st.floats(-5, 5, allow_nan=False)] * 3), min_size=n, max_size=n))


@settings(max_examples=60, deadline=None)
@given(clouds, clouds, st.floats(0.05, 3.0))
def test_matches_brute_force_exactly(a, b, tau):
    a, b = np.array(a), np.array(b)
    np.testing.assert_array_equal(nearest_sq(a, b), brute_sq(a, b))
    assert chamfer(a, b) == brute_chamfer(a, b)
    assert f_score(a, b, tau) == brute_f(a, b, tau)


def test_examples():
    assert chamfer([[0, 0, 0]], [[1, 0, 0]]) == 1.0
    pts = np.random.default_rng(0).normal(size=(30, 3))
    assert chamfer(pts, pts) == 0.0 and f_score(pts, pts) == 100.0
    # 19 shared points and one far outlier on each side: precision = recall = 19/20
    shared = np.arange(19)[:, None] * np.array([[10.0, 0, 0]])
    a = np.vstack([shared, [[500, 0, 0]]])
    b = np.vstack([shared, [[-500, 0, 0]]])
    assert f_score(a, b) == pytest.approx(95.0)
    a19 = np.vstack([shared, [[500, 0, 0]]])
    assert f_score(a19, shared) == pytest.approx(200 * 0.95 / 1.95)


def test_empty_cloud():
    with pytest.raises(EmptyCloud):
        chamfer(np.zeros((0, 3)), np.zeros((3, 3)))
    with pytest.raises(EmptyCloud):
        f_score(np.zeros((3, 3)), [])


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 1.0), st.floats(1.0, 3.0))
def test_f_score_monotone_in_tau(t1, t2):
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(40, 3)), rng.normal(size=(50, 3))
    assert f_score(a, b, t1) <= f_score(a, b, t2)


def random_params(rng, n):
    return AgentParams.rigid(rng.normal(0, 0.5, (n, 3)), rng.normal(0, 5, (n, 3)))


def test_cd_h_rigid_invariance():
    rng = np.random.default_rng(3)
    n = 3
    pred = [rng.normal(size=(50, 3)) for _ in range(n)]
    gt = [rng.normal(size=(50, 3)) for _ in range(n)]
    ph = {h: random_params(rng, n) for h in "lr"}
    gh = {h: random_params(rng, n) for h in "lr"}
    ref = cd_h(pred, gt, ph, gh)
    rot = axis_angle_to_matrix([0.4, -1.1, 0.7])
    shift = np.array([3.0, -2.0, 10.0])
    pred2 = [p @ rot.T + shift for p in pred]
    ph2 = {}
    for h, p in ph.items():
        phi = np.stack([_compose(rot, f) for f in p.phi])
        ph2[h] = AgentParams.rigid(phi, p.gamma @ rot.T + shift)
    assert cd_h(pred2, gt, ph2, gh) == pytest.approx(ref, abs=1e-9)


def _compose(rot, phi):
    from scipy.spatial.transform import Rotation
    return Rotation.from_matrix(rot @ axis_angle_to_matrix(phi)).as_rotvec()


def test_to_hand_frame_inverts_placement():
    rng = np.random.default_rng(4)
    pts = rng.normal(size=(10, 3))
    phi, gamma = rng.normal(size=3), rng.normal(size=3)
    placed = pts @ axis_angle_to_matrix(phi).T + gamma
    np.testing.assert_allclose(to_hand_frame(placed, phi, gamma), pts, atol=1e-12)


def test_cd_h_errors():
    rng = np.random.default_rng(5)
    cl = [rng.normal(size=(5, 3))] * 2
    hands = {h: random_params(rng, 2) for h in "lr"}
    with pytest.raises(FrameCountMismatch):
        cd_h(cl, cl[:1], hands, hands)
    with pytest.raises(MissingAgent):
        cd_h(cl, cl, {"l": hands["l"]}, hands)
    with pytest.raises(FrameCountMismatch):
        cd_h(cl, cl, {h: random_params(rng, 3) for h in "lr"}, hands)


def test_evaluate_perfect_prediction():
    box = make_box((2.0, 3.0, 4.0))
    rng = np.random.default_rng(6)
    params = {a: random_params(rng, 4) for a in "lro"}
    report = evaluate(box.vertices, box.vertices, box.faces, params, params, n_samples=256)
    assert (report.cd_h, report.cd, report.f10) == (0.0, 0.0, 100.0)
    d = report.to_dict()
    assert list(d)[:3] == ["CD_h", "CD", "F10"] and len(d["per_frame"]) == 4
    assert report.summary().startswith("CD_h 0.0000")
