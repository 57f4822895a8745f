"""Rotations, rigid transforms and the pinhole camera.

Quaternions are stored as (w, x, y, z). Every array function accepts
arbitrary leading batch dimensions. Points use the column-vector
convention ``p' = R @ p + t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonPositiveDepth

# Below this angle the closed forms lose precision; Taylor series take over.
_SERIES_ANGLE = 1e-3
MIN_DEPTH = 1e-8


def skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_normalize_backward(q: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the raw quaternion given the gradient w.r.t. q/|q|."""
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    unit = q / norm
    return (grad_unit - unit * np.sum(unit * grad_unit, axis=-1, keepdims=True)) / norm


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_multiply_backward(a, b, grad):
    """Return (dL/da, dL/db) for ``quat_multiply(a, b)``."""
    conj = np.array([1.0, -1.0, -1.0, -1.0])
    # d(a*b)/da applied transposed equals grad * conj(b); same on the left for b.
    return quat_multiply(grad, b * conj), quat_multiply(a * conj, grad)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (no normalisation here)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def quat_to_matrix_backward(q: np.ndarray, grad_r: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`quat_to_matrix` (treating q as given, unnormalised)."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    g = grad_r
    g00, g01, g02 = g[..., 0, 0], g[..., 0, 1], g[..., 0, 2]
    g10, g11, g12 = g[..., 1, 0], g[..., 1, 1], g[..., 1, 2]
    g20, g21, g22 = g[..., 2, 0], g[..., 2, 1], g[..., 2, 2]
    dw = 2 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    dx = 2 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12 + z * g20 + w * g21 - 2 * x * g22)
    dy = 2 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21 - 2 * y * g22)
    dz = 2 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11 + y * g12 + x * g20 + y * g21)
    return np.stack([dw, dx, dy, dz], axis=-1)


def _angle(phi: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(phi * phi, axis=-1))


def _rodrigues_coeffs(theta):
    """A = sin t / t, B = (1 - cos t) / t^2, C = dA/dt / t, D = dB/dt / t."""
    small = theta < _SERIES_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    s, c = np.sin(t), np.cos(t)
    a = np.where(small, 1 - t2 / 6 + t2 * t2 / 120, s / t)
    b = np.where(small, 0.5 - t2 / 24 + t2 * t2 / 720, (1 - c) / t**2)
    cc = np.where(small, -1 / 3 + t2 / 30 - t2 * t2 / 840, (t * c - s) / t**3)
    d = np.where(small, -1 / 12 + t2 / 180 - t2 * t2 / 6720, (t * s - 2 * (1 - c)) / t**4)
    return a, b, cc, d


def axis_angle_to_matrix(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    a, b, _, _ = _rodrigues_coeffs(_angle(phi))
    k = skew(phi)
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def axis_angle_matrix_jacobian(phi: np.ndarray) -> np.ndarray:
    """dR/dphi_k stacked on a trailing axis: shape (..., 3, 3, 3)."""
    phi = np.asarray(phi, dtype=np.float64)
    a, b, c, d = _rodrigues_coeffs(_angle(phi))
    k = skew(phi)
    k2 = k @ k
    basis = skew(np.eye(3))  # [e_k]x for k = 0, 1, 2
    out = np.empty(phi.shape[:-1] + (3, 3, 3))
    for i in range(3):
        ei = basis[i]
        term = (
            (c * phi[..., i])[..., None, None] * k
            + a[..., None, None] * ei
            + (d * phi[..., i])[..., None, None] * k2
            + b[..., None, None] * (ei @ k + k @ ei)
        )
        out[..., i] = term
    return out


def axis_angle_backward(phi: np.ndarray, grad_r: np.ndarray) -> np.ndarray:
    """dL/dphi from dL/dR for R = axis_angle_to_matrix(phi)."""
    jac = axis_angle_matrix_jacobian(phi)
    return np.einsum("...ij,...ijk->...k", grad_r, jac)


def _half_sinc(theta):
    """s = sin(t/2)/t and e = (ds/dt)/t."""
    small = theta < _SERIES_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    s = np.where(small, 0.5 - t2 / 48 + t2 * t2 / 3840, np.sin(t / 2) / t)
    e = np.where(
        small,
        -1 / 24 + t2 / 960 - t2 * t2 / 107520,
        (0.5 * t * np.cos(t / 2) - np.sin(t / 2)) / t**3,
    )
    return s, e


def axis_angle_to_quat(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    theta = _angle(phi)
    s, _ = _half_sinc(theta)
    return np.concatenate([np.cos(theta / 2)[..., None], s[..., None] * phi], axis=-1)


def axis_angle_to_quat_backward(phi: np.ndarray, grad_q: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    s, e = _half_sinc(_angle(phi))
    gw, gv = grad_q[..., 0], grad_q[..., 1:]
    dot = np.sum(phi * gv, axis=-1)
    return (-0.5 * s * gw)[..., None] * phi + s[..., None] * gv + (e * dot)[..., None] * phi


def matrix_to_quat(r: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns the representative with w >= 0."""
    r = np.asarray(r, dtype=np.float64)
    flat = r.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for n, m in enumerate(flat):
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        q = np.asarray(q)
        out[n] = q if q[0] >= 0 else -q
    return quat_normalize(out).reshape(r.shape[:-2] + (4,))


def quat_to_axis_angle(q: np.ndarray) -> np.ndarray:
    q = quat_normalize(q)
    q = np.where(q[..., :1] < 0, -q, q)
    vnorm = np.linalg.norm(q[..., 1:], axis=-1)
    theta = 2 * np.arctan2(vnorm, q[..., 0])
    small = vnorm < 1e-12
    # theta / sin(theta/2) -> 2 as theta -> 0
    scale = np.where(small, 2.0, theta / np.where(small, 1.0, vnorm))
    return scale[..., None] * q[..., 1:]


def matrix_to_axis_angle(r: np.ndarray) -> np.ndarray:
    return quat_to_axis_angle(matrix_to_quat(r))


@dataclass(frozen=True)
class Rotation:
    """Unit quaternion (w, x, y, z)."""

    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        object.__setattr__(self, "quat", quat_normalize(np.asarray(self.quat, dtype=np.float64)))

    @classmethod
    def identity(cls) -> Rotation:
        return cls()

    @classmethod
    def from_axis_angle(cls, phi) -> Rotation:
        return cls(axis_angle_to_quat(phi))

    @classmethod
    def from_matrix(cls, r) -> Rotation:
        return cls(matrix_to_quat(r))

    def as_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    def as_axis_angle(self) -> np.ndarray:
        return quat_to_axis_angle(self.quat)

    def __mul__(self, other: Rotation) -> Rotation:
        return Rotation(quat_multiply(self.quat, other.quat))

    def inverse(self) -> Rotation:
        return Rotation(self.quat * np.array([1.0, -1.0, -1.0, -1.0]))


def axis_angle_to_rotation(phi) -> Rotation:
    return Rotation.from_axis_angle(phi)


@dataclass(frozen=True)
class RigidTransform:
    rotation: Rotation = field(default_factory=Rotation)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    @classmethod
    def from_axis_angle(cls, phi, translation) -> RigidTransform:
        return cls(Rotation.from_axis_angle(phi), translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.as_matrix()
        m[:3, 3] = self.translation
        return m

    def apply(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        return p @ self.rotation.as_matrix().T + self.translation

    def compose(self, other: RigidTransform) -> RigidTransform:
        """``self`` after ``other``."""
        return RigidTransform(self.rotation * other.rotation, self.apply(other.translation))

    def inverse(self) -> RigidTransform:
        inv = self.rotation.inverse()
        return RigidTransform(inv, -(inv.as_matrix() @ self.translation))


def apply_rigid(transform: RigidTransform, p: np.ndarray) -> np.ndarray:
    return transform.apply(p)


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: RigidTransform = field(default_factory=RigidTransform)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")

    def to_camera(self, p_world: np.ndarray) -> np.ndarray:
        return self.world_to_camera.apply(p_world)

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": int(self.width),
            "height": int(self.height),
            "world_to_camera": {
                "quat_wxyz": [float(v) for v in self.world_to_camera.rotation.quat],
                "translation": [float(v) for v in self.world_to_camera.translation],
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> Camera:
        w2c = d.get("world_to_camera") or {}
        transform = RigidTransform(
            Rotation(w2c.get("quat_wxyz", [1.0, 0.0, 0.0, 0.0])), w2c.get("translation", [0.0, 0.0, 0.0])
        )
        return cls(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
            int(d["width"]), int(d["height"]), transform,
        )


def project(camera: Camera, p_cam) -> tuple[float, float, float]:
    """Pinhole projection of a camera-space point to (u, v, depth)."""
    x, y, z = (float(c) for c in np.asarray(p_cam, dtype=np.float64).reshape(3))
    if z <= MIN_DEPTH:
        raise NonPositiveDepth(f"point at depth {z!r} is behind or on the camera plane")
    return camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy, z


def project_jacobian(camera: Camera, p_cam) -> np.ndarray:
    """d(u, v)/d(x, y, z) as a 2x3 matrix."""
    x, y, z = np.asarray(p_cam, dtype=np.float64).reshape(3)
    if z <= MIN_DEPTH:
        raise NonPositiveDepth(f"point at depth {z!r} is behind or on the camera plane")
    return np.array(
        [
            [camera.fx / z, 0.0, -camera.fx * x / z**2],
            [0.0, camera.fy / z, -camera.fy * y / z**2],
        ]
    )
