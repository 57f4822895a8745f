"""Tile-based differentiable Gaussian splat rasterizer (CPU).

Forward: EWA projection of every splat, one global stable front-to-back
depth sort, 16x16 tile binning, then per-pixel alpha compositing.
Backward: the exact adjoint of the same computation, traversing each
pixel's contributors back to front. Per-splat gradient contributions are
written to per-entry buffers and reduced in fixed tile order, so results
do not depend on the number of threads.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import NonFiniteSplat, NonPositiveDepth, StateMismatch
from .gaussians import GaussianSet, SplatGradients, concat, sigmoid
from .geometry import MIN_DEPTH, Camera, Rotation, quat_normalize, quat_normalize_backward, quat_to_matrix, quat_to_matrix_backward

TILE = 16
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
DILATION = 0.3
SIGMA_EXTENT = 3.0

if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "omp"
_threads = os.environ.get("HANDSPLAT_NUM_THREADS")
if _threads:
    numba.set_num_threads(max(1, min(int(_threads), numba.config.NUMBA_NUM_THREADS)))


@numba.njit(cache=True)
def _bin_tiles(mean2d, radius, width, height, tile):
    m = mean2d.shape[0]
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    rect = np.full((m, 4), -1, dtype=np.int64)
    counts = np.zeros(ntx * nty + 1, dtype=np.int64)
    for i in range(m):
        r = radius[i]
        x0 = max(0, int(np.ceil(mean2d[i, 0] - r)))
        x1 = min(width - 1, int(np.floor(mean2d[i, 0] + r)))
        y0 = max(0, int(np.ceil(mean2d[i, 1] - r)))
        y1 = min(height - 1, int(np.floor(mean2d[i, 1] + r)))
        if x0 > x1 or y0 > y1:
            continue
        rect[i, 0] = x0
        rect[i, 1] = x1
        rect[i, 2] = y0
        rect[i, 3] = y1
        for ty in range(y0 // tile, y1 // tile + 1):
            for tx in range(x0 // tile, x1 // tile + 1):
                counts[ty * ntx + tx + 1] += 1
    offsets = np.cumsum(counts)
    entries = np.empty(offsets[-1], dtype=np.int64)
    fill = offsets[:-1].copy()
    for i in range(m):
        if rect[i, 0] < 0:
            continue
        for ty in range(rect[i, 2] // tile, rect[i, 3] // tile + 1):
            for tx in range(rect[i, 0] // tile, rect[i, 1] // tile + 1):
                t = ty * ntx + tx
                entries[fill[t]] = i
                fill[t] += 1
    return rect, offsets, entries


@numba.njit(parallel=True, cache=True)
def _render_tiles(mean2d, conic, opacity, color, set_id, n_sets, rect, offsets, entries,
                  width, height, tile, background, alpha_max, alpha_min):
    ntx = (width + tile - 1) // tile
    ntiles = offsets.shape[0] - 1
    rgb = np.zeros((height, width, 3))
    t_final = np.ones((height, width))
    n_contrib = np.zeros((height, width), dtype=np.int64)
    set_weight = np.zeros((height, width, n_sets))
    for t in numba.prange(ntiles):
        tx = t % ntx
        ty = t // ntx
        start = offsets[t]
        stop = offsets[t + 1]
        for py in range(ty * tile, min(height, ty * tile + tile)):
            for px in range(tx * tile, min(width, tx * tile + tile)):
                trans = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                last = 0
                for e in range(start, stop):
                    i = entries[e]
                    if px < rect[i, 0] or px > rect[i, 1] or py < rect[i, 2] or py > rect[i, 3]:
                        continue
                    dx = px - mean2d[i, 0]
                    dy = py - mean2d[i, 1]
                    power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) - conic[i, 1] * dx * dy
                    a = opacity[i] * np.exp(power)
                    if a > alpha_max:
                        a = alpha_max
                    if a < alpha_min:
                        continue
                    w = a * trans
                    c0 += color[i, 0] * w
                    c1 += color[i, 1] * w
                    c2 += color[i, 2] * w
                    set_weight[py, px, set_id[i]] += w
                    trans *= 1.0 - a
                    last = e - start + 1
                rgb[py, px, 0] = c0 + trans * background[0]
                rgb[py, px, 1] = c1 + trans * background[1]
                rgb[py, px, 2] = c2 + trans * background[2]
                t_final[py, px] = trans
                n_contrib[py, px] = last
    return rgb, t_final, n_contrib, set_weight


@numba.njit(parallel=True, cache=True)
def _backward_tiles(mean2d, conic, opacity, color, rect, offsets, entries, width, height, tile,
                    background, alpha_max, alpha_min, t_final, n_contrib, grad_rgb):
    ntx = (width + tile - 1) // tile
    ntiles = offsets.shape[0] - 1
    n_entries = entries.shape[0]
    b_mean = np.zeros((n_entries, 2))
    b_conic = np.zeros((n_entries, 3))
    b_opacity = np.zeros(n_entries)
    b_color = np.zeros((n_entries, 3))
    for t in numba.prange(ntiles):
        tx = t % ntx
        ty = t // ntx
        start = offsets[t]
        for py in range(ty * tile, min(height, ty * tile + tile)):
            for px in range(tx * tile, min(width, tx * tile + tile)):
                g0 = grad_rgb[py, px, 0]
                g1 = grad_rgb[py, px, 1]
                g2 = grad_rgb[py, px, 2]
                if g0 == 0.0 and g1 == 0.0 and g2 == 0.0:
                    continue
                trans = t_final[py, px]
                s0 = background[0] * trans
                s1 = background[1] * trans
                s2 = background[2] * trans
                for e in range(start + n_contrib[py, px] - 1, start - 1, -1):
                    i = entries[e]
                    if px < rect[i, 0] or px > rect[i, 1] or py < rect[i, 2] or py > rect[i, 3]:
                        continue
                    dx = px - mean2d[i, 0]
                    dy = py - mean2d[i, 1]
                    power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) - conic[i, 1] * dx * dy
                    gauss = np.exp(power)
                    raw = opacity[i] * gauss
                    a = raw
                    clamped = False
                    if a > alpha_max:
                        a = alpha_max
                        clamped = True
                    if a < alpha_min:
                        continue
                    trans = trans / (1.0 - a)
                    w = a * trans
                    b_color[e, 0] += w * g0
                    b_color[e, 1] += w * g1
                    b_color[e, 2] += w * g2
                    inv = 1.0 / (1.0 - a)
                    d_alpha = (g0 * (trans * color[i, 0] - s0 * inv)
                               + g1 * (trans * color[i, 1] - s1 * inv)
                               + g2 * (trans * color[i, 2] - s2 * inv))
                    s0 += color[i, 0] * w
                    s1 += color[i, 1] * w
                    s2 += color[i, 2] * w
                    if clamped:
                        continue
                    b_opacity[e] += gauss * d_alpha
                    d_power = raw * d_alpha
                    b_mean[e, 0] += d_power * (conic[i, 0] * dx + conic[i, 1] * dy)
                    b_mean[e, 1] += d_power * (conic[i, 1] * dx + conic[i, 2] * dy)
                    b_conic[e, 0] += -0.5 * d_power * dx * dx
                    b_conic[e, 1] += -0.5 * d_power * dx * dy
                    b_conic[e, 2] += -0.5 * d_power * dy * dy
    return b_mean, b_conic, b_opacity, b_color


@numba.njit(cache=True)
def _reduce_entries(entries, m, b_mean, b_conic, b_opacity, b_color):
    g_mean = np.zeros((m, 2))
    g_conic = np.zeros((m, 3))
    g_opacity = np.zeros(m)
    g_color = np.zeros((m, 3))
    for e in range(entries.shape[0]):
        i = entries[e]
        g_mean[i, 0] += b_mean[e, 0]
        g_mean[i, 1] += b_mean[e, 1]
        for k in range(3):
            g_conic[i, k] += b_conic[e, k]
            g_color[i, k] += b_color[e, k]
        g_opacity[i] += b_opacity[e]
    return g_mean, g_conic, g_opacity, g_color


@dataclass
class _Projection:
    """Per-splat intermediates of the EWA projection (rows = visible splats)."""

    index: np.ndarray  # row -> index into the merged set
    p_cam: np.ndarray
    jac: np.ndarray
    t_mat: np.ndarray
    sigma3d: np.ndarray
    m_mat: np.ndarray
    rot: np.ndarray
    scale: np.ndarray
    quat_raw: np.ndarray
    quat_unit: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray  # full symmetric 2x2 inverse covariance
    mean2d: np.ndarray
    radius: np.ndarray
    opacity: np.ndarray
    color_raw: np.ndarray


def _ewa(camera: Camera, centers, quats, log_scales):
    w_rot = camera.world_to_camera.rotation.as_matrix()
    p_cam = centers @ w_rot.T + camera.world_to_camera.translation
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    jac = np.zeros((len(z), 2, 3))
    jac[:, 0, 0] = camera.fx / z
    jac[:, 0, 2] = -camera.fx * x / z**2
    jac[:, 1, 1] = camera.fy / z
    jac[:, 1, 2] = -camera.fy * y / z**2
    t_mat = jac @ w_rot
    quat_unit = quat_normalize(quats)
    rot = quat_to_matrix(quat_unit)
    scale = np.exp(log_scales)
    m_mat = rot * scale[:, None, :]
    sigma3d = m_mat @ np.swapaxes(m_mat, 1, 2)
    cov2d = t_mat @ sigma3d @ np.swapaxes(t_mat, 1, 2) + DILATION * np.eye(2)
    mean2d = np.stack([camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy], axis=1)
    return p_cam, jac, t_mat, quat_unit, rot, scale, m_mat, sigma3d, cov2d, mean2d


def project_gaussian(camera: Camera, center, rotation, scale):
    """Screen-space mean and covariance (pixels^2) of one 3D Gaussian."""
    quat = rotation.quat if isinstance(rotation, Rotation) else np.asarray(rotation, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64).reshape(1, 3)
    depth = camera.to_camera(center)[0, 2]
    if depth <= MIN_DEPTH:
        raise NonPositiveDepth(f"splat center at depth {depth!r}")
    with np.errstate(divide="ignore"):
        log_scale = np.log(np.asarray(scale, dtype=np.float64).reshape(1, 3))
    out = _ewa(camera, center, quat.reshape(1, 4), log_scale)
    return out[-1][0], out[-2][0]


def _project_all(camera: Camera, merged: GaussianSet) -> _Projection:
    depth = camera.to_camera(merged.centers)[:, 2] if len(merged) else np.zeros(0)
    visible = np.nonzero(depth > MIN_DEPTH)[0]
    # stable sort keeps ties in original index order
    index = visible[np.argsort(depth[visible], kind="stable")]
    g = merged.subset(index)
    p_cam, jac, t_mat, quat_unit, rot, scale, m_mat, sigma3d, cov2d, mean2d = _ewa(
        camera, g.centers, g.rotations, g.log_scales
    )
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    conic = np.empty_like(cov2d)
    conic[:, 0, 0] = cov2d[:, 1, 1] / det
    conic[:, 1, 1] = cov2d[:, 0, 0] / det
    conic[:, 0, 1] = -cov2d[:, 0, 1] / det
    conic[:, 1, 0] = -cov2d[:, 1, 0] / det
    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = np.ceil(SIGMA_EXTENT * np.sqrt(lam)).astype(np.int64)
    return _Projection(
        index=index, p_cam=p_cam, jac=jac, t_mat=t_mat, sigma3d=sigma3d, m_mat=m_mat, rot=rot,
        scale=scale, quat_raw=g.rotations, quat_unit=quat_unit, cov2d=cov2d, conic=conic,
        mean2d=mean2d, radius=radius, opacity=sigmoid(g.opacity_logits), color_raw=g.colors,
    )


@dataclass
class _ForwardCache:
    sizes: tuple
    projection: _Projection
    rect: np.ndarray
    offsets: np.ndarray
    entries: np.ndarray
    t_final: np.ndarray
    n_contrib: np.ndarray
    background: np.ndarray


@dataclass
class RenderedImage:
    """Composited image plus the buffers the backward pass replays.

    ``set_weight[..., k]`` is the compositing weight mass contributed by the
    k-th input set at each pixel (its visible coverage).
    """

    rgb: np.ndarray
    alpha: np.ndarray
    set_weight: np.ndarray
    cache: _ForwardCache | None = field(default=None, repr=False)


def _packed_conic(conic):
    return np.ascontiguousarray(np.stack([conic[:, 0, 0], conic[:, 0, 1], conic[:, 1, 1]], axis=1))


def rasterize(camera: Camera, sets, background=(0.0, 0.0, 0.0), retain: bool = True) -> RenderedImage:
    """Render the union of ``sets`` front to back."""
    if isinstance(sets, GaussianSet):
        sets = [sets]
    sets = list(sets)
    background = np.asarray(background, dtype=np.float64).reshape(3)
    merged = concat(sets)
    if not np.all(np.isfinite(merged.as_array())):
        raise NonFiniteSplat("splat attributes contain NaN or infinity")
    set_id_all = np.concatenate([np.full(len(s), k, dtype=np.int64) for k, s in enumerate(sets)] or [np.zeros(0, np.int64)])
    proj = _project_all(camera, merged)
    rect, offsets, entries = _bin_tiles(proj.mean2d, proj.radius, camera.width, camera.height, TILE)
    color = np.ascontiguousarray(np.clip(proj.color_raw, 0.0, 1.0))
    rgb, t_final, n_contrib, set_weight = _render_tiles(
        np.ascontiguousarray(proj.mean2d), _packed_conic(proj.conic), proj.opacity, color,
        set_id_all[proj.index], max(len(sets), 1), rect, offsets, entries,
        camera.width, camera.height, TILE, background, ALPHA_MAX, ALPHA_MIN,
    )
    cache = None
    if retain:
        cache = _ForwardCache(tuple(len(s) for s in sets), proj, rect, offsets, entries, t_final, n_contrib, background)
    return RenderedImage(rgb=rgb, alpha=1.0 - t_final, set_weight=set_weight[..., : len(sets)], cache=cache)


def rasterize_backward(camera: Camera, sets, grad_rgb: np.ndarray, image: RenderedImage | None) -> list[SplatGradients]:
    """Gradients of a scalar loss w.r.t. every splat attribute of every set."""
    if isinstance(sets, GaussianSet):
        sets = [sets]
    sets = list(sets)
    if image is None or image.cache is None:
        raise StateMismatch("rasterize_backward needs a RenderedImage produced with retain=True")
    cache = image.cache
    if cache.sizes != tuple(len(s) for s in sets):
        raise StateMismatch("splat sets do not match the ones used in the forward pass")
    grad_rgb = np.ascontiguousarray(grad_rgb, dtype=np.float64)
    if grad_rgb.shape != (camera.height, camera.width, 3):
        raise StateMismatch(f"grad_rgb has shape {grad_rgb.shape}, expected {(camera.height, camera.width, 3)}")

    proj = cache.projection
    m = len(proj.index)
    total = sum(cache.sizes)
    out = SplatGradients.zeros(total)
    if m and np.any(grad_rgb):
        color = np.ascontiguousarray(np.clip(proj.color_raw, 0.0, 1.0))
        buffers = _backward_tiles(
            np.ascontiguousarray(proj.mean2d), _packed_conic(proj.conic), proj.opacity, color,
            cache.rect, cache.offsets, cache.entries, camera.width, camera.height, TILE,
            cache.background, ALPHA_MAX, ALPHA_MIN, cache.t_final, cache.n_contrib, grad_rgb,
        )
        g_mean, g_conic, g_opacity, g_color = _reduce_entries(cache.entries, m, *buffers)
        _backward_projection(camera, proj, g_mean, g_conic, g_opacity, g_color, out)

    result = []
    start = 0
    for n in cache.sizes:
        sl = slice(start, start + n)
        result.append(SplatGradients(
            out.centers[sl], out.rotations[sl], out.log_scales[sl], out.opacity_logits[sl], out.colors[sl]
        ))
        start += n
    return result


def _backward_projection(camera, proj: _Projection, g_mean, g_conic, g_opacity, g_color, out: SplatGradients):
    q = proj.conic
    g_q = np.empty_like(q)
    g_q[:, 0, 0] = g_conic[:, 0]
    g_q[:, 0, 1] = g_conic[:, 1]
    g_q[:, 1, 0] = g_conic[:, 1]
    g_q[:, 1, 1] = g_conic[:, 2]
    g_cov = -q @ g_q @ q
    t_mat = proj.t_mat
    g_sigma = np.swapaxes(t_mat, 1, 2) @ g_cov @ t_mat
    g_t = 2.0 * g_cov @ t_mat @ proj.sigma3d
    w_rot = camera.world_to_camera.rotation.as_matrix()
    g_j = g_t @ w_rot.T

    x, y, z = proj.p_cam[:, 0], proj.p_cam[:, 1], proj.p_cam[:, 2]
    fx, fy = camera.fx, camera.fy
    g_p = np.zeros_like(proj.p_cam)
    g_p[:, 0] = -fx / z**2 * g_j[:, 0, 2] + fx / z * g_mean[:, 0]
    g_p[:, 1] = -fy / z**2 * g_j[:, 1, 2] + fy / z * g_mean[:, 1]
    g_p[:, 2] = (
        -fx / z**2 * g_j[:, 0, 0]
        + 2 * fx * x / z**3 * g_j[:, 0, 2]
        - fy / z**2 * g_j[:, 1, 1]
        + 2 * fy * y / z**3 * g_j[:, 1, 2]
        - fx * x / z**2 * g_mean[:, 0]
        - fy * y / z**2 * g_mean[:, 1]
    )
    g_center = g_p @ w_rot

    g_m = 2.0 * g_sigma @ proj.m_mat
    g_rot = g_m * proj.scale[:, None, :]
    g_scale = np.sum(g_m * proj.rot, axis=1)
    g_quat = quat_normalize_backward(proj.quat_raw, quat_to_matrix_backward(proj.quat_unit, g_rot))

    inside = (proj.color_raw >= 0.0) & (proj.color_raw <= 1.0)
    idx = proj.index
    out.centers[idx] = g_center
    out.rotations[idx] = g_quat
    out.log_scales[idx] = g_scale * proj.scale
    out.opacity_logits[idx] = g_opacity * proj.opacity * (1.0 - proj.opacity)
    out.colors[idx] = g_color * inside
