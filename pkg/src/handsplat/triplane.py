"""Feature triplane plus a small MLP that deforms canonical splats.

For every splat the three axis-aligned planes are sampled bilinearly at
the splat center, the features are concatenated and decoded into LBS
weights (softmax over J + 1 channels, the last being a background
channel), a color offset, a rotation offset, a log-scale offset and an
opacity offset.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import StateMismatch
from .gaussians import GaussianSet
from .geometry import quat_normalize, quat_normalize_backward

RESOLUTION = 64
CHANNELS = 16
HIDDEN = 64
FEATURE_STD = 0.01
PLANE_AXES = ((0, 1), (0, 2), (1, 2))  # xy, xz, yz
# color 3, rotation 4, log-scale 3, opacity 1
ATTRIBUTE_WIDTH = 11


@dataclass
class Triplane:
    """Planes stored as one (3, R, R, C) array in xy, xz, yz order."""

    planes: np.ndarray
    box_min: np.ndarray
    box_max: np.ndarray

    def __post_init__(self):
        self.planes = np.asarray(self.planes, dtype=np.float64)
        self.box_min = np.asarray(self.box_min, dtype=np.float64).reshape(3)
        self.box_max = np.asarray(self.box_max, dtype=np.float64).reshape(3)
        if np.any(self.box_max - self.box_min <= 0):
            raise ValueError("normalization box needs strictly positive extents")

    @classmethod
    def create(cls, box_min, box_max, rng: np.random.Generator, resolution: int = RESOLUTION,
               channels: int = CHANNELS) -> Triplane:
        planes = rng.normal(0.0, FEATURE_STD, size=(3, resolution, resolution, channels))
        return cls(planes, box_min, box_max)

    @classmethod
    def around(cls, points, rng, padding: float = 0.15, **kwargs) -> Triplane:
        """Box enclosing ``points`` with a relative margin on every side."""
        lo, hi = points.min(axis=0), points.max(axis=0)
        pad = padding * np.maximum(hi - lo, 1e-3)
        return cls.create(lo - pad, hi + pad, rng, **kwargs)

    @property
    def resolution(self) -> int:
        return self.planes.shape[1]

    @property
    def channels(self) -> int:
        return self.planes.shape[3]


@dataclass
class MlpHeads:
    """Two-layer ReLU trunk and one linear layer holding every head."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    n_lbs: int

    @classmethod
    def create(cls, in_dim: int, n_lbs: int, rng: np.random.Generator, hidden: int = HIDDEN) -> MlpHeads:
        out = n_lbs + ATTRIBUTE_WIDTH
        # zero output layer: the deformation starts as the identity
        return cls(
            rng.normal(0.0, np.sqrt(2.0 / in_dim), (in_dim, hidden)),
            np.zeros(hidden),
            rng.normal(0.0, np.sqrt(2.0 / hidden), (hidden, hidden)),
            np.zeros(hidden),
            np.zeros((hidden, out)),
            np.zeros(out),
            n_lbs,
        )

    def params(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2, "w3": self.w3, "b3": self.b3}


def network_params(planes: Triplane, heads: MlpHeads) -> dict:
    return {"planes": planes.planes, **heads.params()}


def rebuild(planes: Triplane, heads: MlpHeads, params: dict) -> tuple[Triplane, MlpHeads]:
    """Swap new arrays into copies of ``planes`` and ``heads``."""
    tp = Triplane(params["planes"], planes.box_min, planes.box_max)
    hd = MlpHeads(params["w1"], params["b1"], params["w2"], params["b2"], params["w3"], params["b3"], heads.n_lbs)
    return tp, hd


@dataclass
class SampleCache:
    grid: np.ndarray  # (N, 3) continuous grid coordinates
    inside: np.ndarray  # (N, 3) derivative mask of the clamp
    scale: np.ndarray  # d grid / d point per axis


def _grid_coords(planes: Triplane, points):
    extent = planes.box_max - planes.box_min
    u = 2.0 * (points - planes.box_min) / extent - 1.0
    inside = (u >= -1.0) & (u <= 1.0)
    u = np.clip(u, -1.0, 1.0)
    r = planes.resolution
    return (u + 1.0) * 0.5 * (r - 1), inside, (r - 1) / extent


def _corners(grid_a, grid_b, r):
    ia = np.minimum(np.floor(grid_a).astype(np.int64), r - 2)
    ib = np.minimum(np.floor(grid_b).astype(np.int64), r - 2)
    return ia, ib, grid_a - ia, grid_b - ib


def sample_triplane(planes: Triplane, points, return_cache: bool = False):
    """Concatenated bilinear features (N, 3C) at canonical points.

    Points outside the normalization box are clamped to its surface.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    grid, inside, scale = _grid_coords(planes, pts)
    r = planes.resolution
    feats = []
    for k, (a, b) in enumerate(PLANE_AXES):
        ia, ib, fa, fb = _corners(grid[:, a], grid[:, b], r)
        p = planes.planes[k]
        feats.append(
            ((1 - fa) * (1 - fb))[:, None] * p[ia, ib]
            + (fa * (1 - fb))[:, None] * p[ia + 1, ib]
            + ((1 - fa) * fb)[:, None] * p[ia, ib + 1]
            + (fa * fb)[:, None] * p[ia + 1, ib + 1]
        )
    out = np.concatenate(feats, axis=1)
    if single:
        out = out[0]
    if return_cache:
        return out, SampleCache(grid, inside, scale)
    return out


def sample_triplane_backward(planes: Triplane, cache: SampleCache, grad_features):
    """Return (d_planes, d_points) for a feature cotangent of shape (N, 3C)."""
    r, c = planes.resolution, planes.channels
    grid = cache.grid
    g_planes = np.zeros_like(planes.planes)
    g_grid = np.zeros_like(grid)
    for k, (a, b) in enumerate(PLANE_AXES):
        ia, ib, fa, fb = _corners(grid[:, a], grid[:, b], r)
        g = grad_features[:, k * c:(k + 1) * c]
        p = planes.planes[k]
        gp = g_planes[k]
        np.add.at(gp, (ia, ib), ((1 - fa) * (1 - fb))[:, None] * g)
        np.add.at(gp, (ia + 1, ib), (fa * (1 - fb))[:, None] * g)
        np.add.at(gp, (ia, ib + 1), ((1 - fa) * fb)[:, None] * g)
        np.add.at(gp, (ia + 1, ib + 1), (fa * fb)[:, None] * g)
        d_fa = (1 - fb)[:, None] * (p[ia + 1, ib] - p[ia, ib]) + fb[:, None] * (p[ia + 1, ib + 1] - p[ia, ib + 1])
        d_fb = (1 - fa)[:, None] * (p[ia, ib + 1] - p[ia, ib]) + fa[:, None] * (p[ia + 1, ib + 1] - p[ia + 1, ib])
        g_grid[:, a] += np.sum(d_fa * g, axis=1)
        g_grid[:, b] += np.sum(d_fb * g, axis=1)
    g_points = g_grid * cache.scale * cache.inside
    return g_planes, g_points


@dataclass
class DeformCache:
    base: GaussianSet
    sample: SampleCache
    features: np.ndarray
    h1: np.ndarray
    h2: np.ndarray
    outputs: np.ndarray
    lbs: np.ndarray | None
    color_tanh: np.ndarray
    quat_raw: np.ndarray


@dataclass
class DeformedGaussians:
    gaussians: GaussianSet
    lbs_weights: np.ndarray | None
    cache: DeformCache | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.gaussians)


def _softmax(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def deform(gaussians: GaussianSet, planes: Triplane, heads: MlpHeads) -> DeformedGaussians:
    """Apply the network's per-splat attribute offsets and predict LBS weights."""
    feats, scache = sample_triplane(planes, gaussians.centers, return_cache=True)
    h1 = np.maximum(feats @ heads.w1 + heads.b1, 0.0)
    h2 = np.maximum(h1 @ heads.w2 + heads.b2, 0.0)
    out = h2 @ heads.w3 + heads.b3
    nl = heads.n_lbs
    lbs = _softmax(out[:, :nl]) if nl else None
    attr = out[:, nl:]
    color_tanh = np.tanh(attr[:, 0:3])
    quat_raw = gaussians.rotations + attr[:, 3:7]
    deformed = GaussianSet(
        gaussians.centers,
        quat_normalize(quat_raw),
        gaussians.log_scales + attr[:, 7:10],
        gaussians.opacity_logits + attr[:, 10],
        gaussians.colors + color_tanh,
    )
    cache = DeformCache(gaussians, scache, feats, h1, h2, out, lbs, color_tanh, quat_raw)
    return DeformedGaussians(deformed, lbs, cache)


def triplane_backward(deformed: DeformedGaussians, planes: Triplane, heads: MlpHeads, grads: dict) -> dict:
    """Reverse pass of :func:`deform`.

    ``grads`` may hold cotangents for "centers", "rotations", "log_scales",
    "opacity_logits", "colors" and "lbs_weights"; missing keys count as
    zero. Returns gradients for the planes, every MLP array and the input
    centers (pass-through plus the sampling path).
    """
    cache = deformed.cache
    if cache is None:
        raise StateMismatch("deformed gaussians carry no forward cache")
    n = len(deformed)
    nl = heads.n_lbs

    def get(name, shape):
        g = grads.get(name)
        return np.zeros(shape) if g is None else np.asarray(g, dtype=np.float64)

    g_out = np.zeros_like(cache.outputs)
    if nl:
        g_lbs = get("lbs_weights", (n, nl))
        s = cache.lbs
        g_out[:, :nl] = s * (g_lbs - np.sum(s * g_lbs, axis=1, keepdims=True))
    g_out[:, nl:nl + 3] = get("colors", (n, 3)) * (1.0 - cache.color_tanh**2)
    g_out[:, nl + 3:nl + 7] = quat_normalize_backward(cache.quat_raw, get("rotations", (n, 4)))
    g_out[:, nl + 7:nl + 10] = get("log_scales", (n, 3))
    g_out[:, nl + 10] = get("opacity_logits", (n,))

    out = {"w3": cache.h2.T @ g_out, "b3": g_out.sum(axis=0)}
    g_h2 = (g_out @ heads.w3.T) * (cache.h2 > 0)
    out["w2"] = cache.h1.T @ g_h2
    out["b2"] = g_h2.sum(axis=0)
    g_h1 = (g_h2 @ heads.w2.T) * (cache.h1 > 0)
    out["w1"] = cache.features.T @ g_h1
    out["b1"] = g_h1.sum(axis=0)
    g_feat = g_h1 @ heads.w1.T
    g_planes, g_points = sample_triplane_backward(planes, cache.sample, g_feat)
    out["planes"] = g_planes
    out["centers"] = get("centers", (n, 3)) + g_points
    return out
