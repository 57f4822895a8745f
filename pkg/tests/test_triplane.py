import numpy as np
import pytest

from handsplat.errors import StateMismatch
from handsplat.gaussians import GaussianSet
from handsplat.triplane import (
    ATTRIBUTE_WIDTH,
    MlpHeads,
    Triplane,
    deform,
    network_params,
    rebuild,
    sample_triplane,
    sample_triplane_backward,
    triplane_backward,
)

from conftest import fd_check

FIELDS = ("centers", "rotations", "log_scales", "opacity_logits", "colors")


def small_setup(seed=0, n=12, n_lbs=5, res=8, channels=4, hidden=16):
    rng = np.random.default_rng(seed)
    planes = Triplane.create([-1, -1, -1], [1, 1, 1], rng, resolution=res, channels=channels)
    planes.planes = rng.normal(0, 0.5, planes.planes.shape)
    heads = MlpHeads.create(3 * channels, n_lbs, rng, hidden=hidden)
    heads.w3 = rng.normal(0, 0.3, heads.w3.shape)
    heads.b3 = rng.normal(0, 0.3, heads.b3.shape)
    heads.b1 = rng.normal(0, 0.3, heads.b1.shape)
    heads.b2 = rng.normal(0, 0.3, heads.b2.shape)
    q = rng.normal(size=(n, 4))
    g = GaussianSet(rng.uniform(-0.8, 0.8, (n, 3)), q / np.linalg.norm(q, axis=1, keepdims=True),
                    rng.normal(-1, 0.3, (n, 3)), rng.normal(size=n), rng.random((n, 3)))
    cot = {f: rng.normal(size=np.shape(getattr(g, f))) for f in FIELDS}
    cot["lbs_weights"] = rng.normal(size=(n, n_lbs))
    return planes, heads, g, cot


def objective(g, planes, heads, cot):
    d = deform(g, planes, heads)
    total = sum(np.sum(cot[f] * getattr(d.gaussians, f)) for f in FIELDS)
    return float(total + np.sum(cot["lbs_weights"] * d.lbs_weights))


def test_default_shapes():
    rng = np.random.default_rng(0)
    planes = Triplane.create([-1] * 3, [1] * 3, rng)
    heads = MlpHeads.create(48, 17, rng)
    assert planes.planes.shape == (3, 64, 64, 16)
    assert heads.w1.shape == (48, 64) and heads.w2.shape == (64, 64)
    assert heads.w3.shape == (64, 17 + ATTRIBUTE_WIDTH)
    assert not np.any(heads.w3) and not np.any(heads.b3)


def test_constant_field():
    planes = Triplane(np.full((3, 8, 8, 4), 0.7), [-1] * 3, [1] * 3)
    np.testing.assert_allclose(sample_triplane(planes, np.zeros(3)), 0.7, rtol=0, atol=1e-15)


def test_node_and_midpoint_values():
    rng = np.random.default_rng(1)
    r = 9
    planes = Triplane(rng.normal(size=(3, r, r, 2)), [0, 0, 0], [8, 8, 8])  # one unit per cell
    p = np.array([3.0, 5.0, 2.0])
    feat = sample_triplane(planes, p)
    np.testing.assert_allclose(feat[0:2], planes.planes[0, 3, 5], atol=1e-14)
    np.testing.assert_allclose(feat[2:4], planes.planes[1, 3, 2], atol=1e-14)
    np.testing.assert_allclose(feat[4:6], planes.planes[2, 5, 2], atol=1e-14)
    mid = sample_triplane(planes, [3.5, 5.0, 2.0])
    np.testing.assert_allclose(mid[0:2], 0.5 * (planes.planes[0, 3, 5] + planes.planes[0, 4, 5]), atol=1e-14)


def test_linear_field_reproduced_exactly():
    r = 16
    ax = np.linspace(-2, 2, r)
    planes = np.zeros((3, r, r, 1))
    planes[0, :, :, 0] = ax[:, None] + 0 * ax[None, :]  # xy plane stores x
    planes[1, :, :, 0] = 2 * ax[None, :] + 0 * ax[:, None]  # xz plane stores 2z
    tp = Triplane(planes, [-2] * 3, [2] * 3)
    pts = np.random.default_rng(2).uniform(-2, 2, (50, 3))
    feat = sample_triplane(tp, pts)
    np.testing.assert_allclose(feat[:, 0], pts[:, 0], atol=1e-12)
    np.testing.assert_allclose(feat[:, 1], 2 * pts[:, 2], atol=1e-12)


def test_sampling_adjoint():
    rng = np.random.default_rng(3)
    planes = Triplane(rng.normal(size=(3, 6, 6, 3)), [-1] * 3, [1] * 3)
    pts = rng.uniform(-1.2, 1.2, (20, 3))
    feat, cache = sample_triplane(planes, pts, return_cache=True)
    g = rng.normal(size=feat.shape)
    d_planes, _ = sample_triplane_backward(planes, cache, g)
    # sampling is linear in the planes, so <g, S p> = <S^T g, p>
    np.testing.assert_allclose(np.sum(g * feat), np.sum(d_planes * planes.planes), rtol=1e-12)


def test_zero_network_is_identity():
    planes, heads, g, _ = small_setup()
    for k, v in heads.params().items():
        setattr(heads, k, np.zeros_like(v))
    d = deform(g, planes, heads)
    for f in FIELDS:
        np.testing.assert_allclose(getattr(d.gaussians, f), getattr(g, f), atol=1e-15)
    np.testing.assert_allclose(d.lbs_weights, 1.0 / heads.n_lbs)


def test_lbs_weights_are_a_distribution():
    planes, heads, g, _ = small_setup(seed=4)
    d = deform(g, planes, heads)
    assert np.all(d.lbs_weights > 0)
    np.testing.assert_allclose(d.lbs_weights.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(d.gaussians.rotations, axis=1), 1.0, atol=1e-12)


def test_no_lbs_heads():
    rng = np.random.default_rng(5)
    planes = Triplane.create([-1] * 3, [1] * 3, rng, resolution=4, channels=2)
    heads = MlpHeads.create(6, 0, rng, hidden=8)
    _, _, g, _ = small_setup()
    d = deform(g, planes, heads)
    assert d.lbs_weights is None
    out = triplane_backward(d, planes, heads, {"colors": np.ones((len(g), 3))})
    assert out["w3"].shape == heads.w3.shape


def test_zero_cotangent_and_missing_cache():
    planes, heads, g, _ = small_setup()
    d = deform(g, planes, heads)
    out = triplane_backward(d, planes, heads, {})
    assert all(not np.any(v) for v in out.values())
    d.cache = None
    with pytest.raises(StateMismatch):
        triplane_backward(d, planes, heads, {})


def test_rebuild_round_trip():
    planes, heads, _, _ = small_setup()
    p2, h2 = rebuild(planes, heads, network_params(planes, heads))
    for k, v in network_params(p2, h2).items():
        np.testing.assert_array_equal(v, network_params(planes, heads)[k])


def test_full_chain_finite_differences():
    planes, heads, g, cot = small_setup(seed=6)
    d = deform(g, planes, heads)
    grads = triplane_backward(d, planes, heads, cot)
    params = network_params(planes, heads)
    for key in params:
        def f(v, key=key):
            p2, h2 = rebuild(planes, heads, {**params, key: v})
            return objective(g, p2, h2, cot)
        assert fd_check(f, params[key], grads[key], eps=1e-6) <= 1, key
    f = lambda c: objective(g.with_(centers=c), planes, heads, cot)
    assert fd_check(f, g.centers, grads["centers"], eps=1e-6) <= 1
