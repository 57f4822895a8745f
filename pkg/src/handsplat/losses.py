"""Training objectives and their gradients.

Every loss takes ``with_grad``; when set it returns ``(value, gradient)``
instead of the bare value. Images are H x W x 3 float arrays in [0, 1].
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
from scipy.ndimage import correlate1d
from scipy.spatial import cKDTree

from .errors import DimensionMismatch, EmptySet, MissingAgent

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
CONTACT_EPS = 1e-8
COLOR_NEIGHBORS = 4


@dataclass
class LossWeights:
    """Weights of every objective term.

    ssim/perceptual/lbs weight the basic photometric and skinning terms,
    mask_fg/mask_bg the two parts of the mask loss, color/scale the
    rendering regularizers and contact the hand-object translation term.
    """

    ssim: float = 0.2
    perceptual: float = 1.0
    lbs: float = 1000.0
    mask_fg: float = 1.0
    mask_bg: float = 1.0
    color: float = 0.1
    scale: float = 100.0
    contact: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value >= 0:
                raise ValueError(f"loss weight {name} must be non-negative, got {value}")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossReport:
    """Unweighted terms, the weights applied to them and the weighted total."""

    terms: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)

    def add(self, name: str, value: float, weight: float) -> None:
        self.terms[name] = self.terms.get(name, 0.0) + float(value)
        self.weights[name] = float(weight)

    @property
    def total(self) -> float:
        return float(sum(self.weights[k] * v for k, v in self.terms.items()))

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.total)) and all(np.isfinite(v) for v in self.terms.values())


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


@lru_cache(maxsize=None)
def _gauss_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


def _blur_valid(x):
    """Separable Gaussian filter keeping only fully supported windows."""
    k = _gauss_kernel()
    pad = (SSIM_WINDOW - 1) // 2
    out = correlate1d(correlate1d(x, k, axis=0, mode="constant"), k, axis=1, mode="constant")
    return out[pad:-pad, pad:-pad]


def _blur_valid_adjoint(g, shape):
    k = _gauss_kernel()[::-1]
    pad = (SSIM_WINDOW - 1) // 2
    full = np.zeros(shape)
    full[pad:-pad, pad:-pad] = g
    return correlate1d(correlate1d(full, k, axis=0, mode="constant"), k, axis=1, mode="constant")


def ssim_loss(pred, gt, with_grad: bool = False):
    """1 - mean SSIM (11x11 Gaussian window, sigma 1.5, per channel)."""
    x, y = _check_pair(pred, gt)
    if x.shape[0] < SSIM_WINDOW or x.shape[1] < SSIM_WINDOW:
        raise DimensionMismatch(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    mx, my = _blur_valid(x), _blur_valid(y)
    exx, eyy, exy = _blur_valid(x * x), _blur_valid(y * y), _blur_valid(x * y)
    a1 = 2 * mx * my + c1
    a2 = 2 * (exy - mx * my) + c2
    b1 = mx * mx + my * my + c1
    b2 = (exx - mx * mx) + (eyy - my * my) + c2
    smap = a1 * a2 / (b1 * b2)
    loss = 1.0 - float(smap.mean())
    if not with_grad:
        return loss
    g = -1.0 / smap.size
    d_mx = g * smap * (2 * my / a1 - 2 * my / a2 - 2 * mx / b1 + 2 * mx / b2)
    d_exy = g * smap * 2 / a2
    d_exx = -g * smap / b2
    grad = (
        _blur_valid_adjoint(d_mx, x.shape)
        + 2 * x * _blur_valid_adjoint(d_exx, x.shape)
        + y * _blur_valid_adjoint(d_exy, x.shape)
    )
    return loss, grad


class FeaturePyramid:
    """Frozen strided 3x3 convolution pyramid used as a perceptual metric.

    Weights come from a fixed seed and are never trained.
    """

    def __init__(self, channels=(3, 8, 16, 32), seed: int = 0):
        rng = np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        for cin, cout in zip(channels[:-1], channels[1:]):
            self.weights.append(rng.normal(0.0, np.sqrt(2.0 / (9 * cin)), (3, 3, cin, cout)))
            self.biases.append(rng.normal(0.0, 0.01, cout))

    @staticmethod
    def _conv(x, w, b):
        h, wd = x.shape[:2]
        ho, wo = (h + 1) // 2, (wd + 1) // 2
        xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
        out = np.broadcast_to(b, (ho, wo, w.shape[3])).copy()
        for ky in range(3):
            for kx in range(3):
                out += xp[ky:ky + 2 * ho:2, kx:kx + 2 * wo:2] @ w[ky, kx]
        return out

    @staticmethod
    def _conv_backward(x_shape, w, g):
        h, wd = x_shape[:2]
        ho, wo = g.shape[:2]
        gp = np.zeros((h + 2, wd + 2, x_shape[2]))
        for ky in range(3):
            for kx in range(3):
                gp[ky:ky + 2 * ho:2, kx:kx + 2 * wo:2] += g @ w[ky, kx].T
        return gp[1:-1, 1:-1]

    def features(self, image):
        feats, pre = [], []
        x = image
        for w, b in zip(self.weights, self.biases):
            z = self._conv(x, w, b)
            pre.append(z)
            x = np.maximum(z, 0.0)
            feats.append(x)
        return feats, pre

    def loss(self, pred, gt, with_grad: bool = False):
        fp, pre = self.features(pred)
        fg, _ = self.features(gt)
        value = float(sum(np.mean(np.abs(a - b)) for a, b in zip(fp, fg)))
        if not with_grad:
            return value
        grad_next = None
        shapes = [pred.shape] + [f.shape for f in fp[:-1]]
        for s in range(len(fp) - 1, -1, -1):
            g = np.sign(fp[s] - fg[s]) / fp[s].size
            if grad_next is not None:
                g = g + grad_next
            g = g * (pre[s] > 0)
            grad_next = self._conv_backward(shapes[s], self.weights[s], g)
        return value, grad_next


@lru_cache(maxsize=1)
def default_pyramid() -> FeaturePyramid:
    return FeaturePyramid(seed=0)


def perceptual_loss(pred, gt, with_grad: bool = False):
    """L1 distance between frozen random-conv feature maps (3 stages)."""
    x, y = _check_pair(pred, gt)
    return default_pyramid().loss(x, y, with_grad)


def nearest_vertex_targets(centers, template) -> np.ndarray:
    """Skin-weight row of the nearest template vertex, plus a zero background column."""
    _, idx = cKDTree(template.vertices).query(np.asarray(centers, dtype=np.float64))
    rows = template.skin_weights[idx]
    return np.concatenate([rows, np.zeros((len(rows), 1))], axis=1)


def lbs_loss(predicted_weights, centers, template, with_grad: bool = False):
    """Mean squared error against nearest-template-vertex skin weights."""
    pred = np.asarray(predicted_weights, dtype=np.float64)
    if pred.shape[0] == 0:
        raise EmptySet("lbs_loss needs at least one splat")
    if pred.shape[1] != template.n_joints + 1:
        raise DimensionMismatch(f"expected {template.n_joints + 1} weight columns, got {pred.shape[1]}")
    diff = pred - nearest_vertex_targets(centers, template)
    value = float(np.mean(diff**2))
    if not with_grad:
        return value
    return value, 2.0 * diff / diff.size


def mask_loss(pred, gt, agent_masks, merged_mask, with_grad: bool = False):
    """Unweighted (foreground, background) mask terms.

    foreground: for every mask in ``agent_masks``, the masked sum of squared
    pixel-channel errors divided by the masked pixel count, summed over masks.
    background: channel-mean prediction summed outside ``merged_mask``,
    divided by the outside pixel count. Empty regions contribute 0.
    Returns ``(fg, bg)`` or ``((fg, bg), (grad_fg, grad_bg))``.
    """
    x, y = _check_pair(pred, gt)
    merged = np.asarray(merged_mask, dtype=np.float64)
    if merged.shape != x.shape[:2]:
        raise DimensionMismatch(f"mask shape {merged.shape} does not match image {x.shape[:2]}")
    fg = 0.0
    grad_fg = np.zeros_like(x)
    diff = x - y
    for m in agent_masks:
        m = np.asarray(m, dtype=np.float64)
        if m.shape != x.shape[:2]:
            raise DimensionMismatch(f"mask shape {m.shape} does not match image {x.shape[:2]}")
        count = m.sum()
        if count == 0:
            continue
        fg += float(np.sum(m[..., None] * diff**2) / count)
        grad_fg += 2.0 * m[..., None] * diff / count
    outside = 1.0 - merged
    n_out = outside.sum()
    bg = float(np.sum(outside * x.mean(axis=2)) / n_out) if n_out else 0.0
    if not with_grad:
        return fg, bg
    grad_bg = np.zeros_like(x)
    if n_out:
        grad_bg[:] = (outside / (n_out * x.shape[2]))[..., None]
    return (fg, bg), (grad_fg, grad_bg)


def neighbor_pairs(centers, k: int = COLOR_NEIGHBORS) -> np.ndarray:
    """(i, j) index pairs linking each splat to its k nearest canonical neighbours."""
    centers = np.asarray(centers, dtype=np.float64)
    n = len(centers)
    if n < 2:
        return np.zeros((0, 2), dtype=np.int64)
    kk = min(k, n - 1)
    _, idx = cKDTree(centers).query(centers, k=kk + 1)
    idx = idx.reshape(n, kk + 1)[:, 1:]
    return np.stack([np.repeat(np.arange(n), kk), idx.reshape(-1)], axis=1)


def render_reg(colors, log_scales, pairs, max_scale: float, with_grad: bool = False):
    """Unweighted (color smoothness, scale hinge) regularizers.

    color: mean over neighbour pairs of squared RGB distance.
    scale: mean over splats of the squared excess of each axis scale over
    ``max_scale``.
    Returns ``(color, scale)`` or ``((color, scale), (grad_colors, grad_log_scales))``.
    """
    colors = np.asarray(colors, dtype=np.float64)
    log_scales = np.asarray(log_scales, dtype=np.float64)
    n = len(colors)
    g_col = np.zeros_like(colors)
    if len(pairs):
        d = colors[pairs[:, 0]] - colors[pairs[:, 1]]
        l_color = float(np.mean(np.sum(d * d, axis=1)))
        gd = 2.0 * d / len(pairs)
        np.add.at(g_col, pairs[:, 0], gd)
        np.add.at(g_col, pairs[:, 1], -gd)
    else:
        l_color = 0.0
    scales = np.exp(log_scales)
    excess = np.maximum(0.0, scales - max_scale)
    l_scale = float(np.sum(excess**2) / n) if n else 0.0
    if not with_grad:
        return l_color, l_scale
    g_ls = 2.0 * excess * scales / n if n else np.zeros_like(log_scales)
    return (l_color, l_scale), (g_col, g_ls)


def contact_loss(translations: dict, with_grad: bool = False):
    """Sum over frames and both hands of the distance between object and hand translations.

    ``translations`` maps "l", "r", "o" to (T, 3) arrays. The value is
    unweighted; gradients are returned for "l", "r" and "o".
    """
    for agent in ("l", "r", "o"):
        if agent not in translations or translations[agent] is None:
            raise MissingAgent(f"contact loss needs translations for agent {agent!r}")
    g_o = np.asarray(translations["o"], dtype=np.float64).reshape(-1, 3)
    value = 0.0
    grads = {"o": np.zeros_like(g_o)}
    for hand in ("l", "r"):
        g_x = np.asarray(translations[hand], dtype=np.float64).reshape(-1, 3)
        if g_x.shape != g_o.shape:
            raise DimensionMismatch(f"hand {hand!r} has {len(g_x)} frames, object has {len(g_o)}")
        d = g_x - g_o
        norms = np.sqrt(np.sum(d * d, axis=1))
        value += float(norms.sum())
        unit = d / np.sqrt(norms**2 + CONTACT_EPS**2)[:, None]
        grads[hand] = unit
        grads["o"] -= unit
    if not with_grad:
        return value
    return value, grads
