"""Skinned hand analog, rigid object templates and canonical-to-camera placement.

The hand rig mirrors the dimensions of the MANO layer: 16 joints (a root
that carries no pose, plus 3 joints on each of 5 fingers, giving a
45-dimensional pose) and 10 shape coefficients. The global wrist rotation
is not part of the pose; it lives in the agent's axis-angle orientation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, StateMismatch
from .gaussians import GaussianSet, logit
from .geometry import (
    axis_angle_backward,
    axis_angle_to_matrix,
    axis_angle_to_quat,
    axis_angle_to_quat_backward,
    quat_multiply,
    quat_multiply_backward,
)

N_POSE = 45
N_SHAPE = 10
AGENTS = ("l", "r", "o")
HANDS = ("l", "r")

# finger order follows the MANO kinematic tree: index, middle, pinky, ring, thumb
FINGERS = ("index", "middle", "pinky", "ring", "thumb")
_FINGER_BASE = {
    "index": (0.0, -4.0, -2.7),
    "middle": (0.0, -4.2, -0.9),
    "pinky": (0.0, -3.6, 2.6),
    "ring": (0.0, -4.0, 0.9),
    "thumb": (0.4, 0.6, -3.6),
}
_FINGER_DIR = {
    "index": (0.0, -1.0, -0.08),
    "middle": (0.0, -1.0, 0.0),
    "pinky": (0.0, -1.0, 0.12),
    "ring": (0.0, -1.0, 0.05),
    "thumb": (0.35, -0.55, -0.76),
}
_FINGER_LENGTHS = {
    "index": (3.9, 2.4, 2.0),
    "middle": (4.3, 2.7, 2.1),
    "pinky": (3.1, 2.0, 1.7),
    "ring": (4.0, 2.6, 2.0),
    "thumb": (3.4, 3.0, 2.5),
}
_FINGER_RADII = {
    "index": (0.85, 0.78, 0.7),
    "middle": (0.88, 0.8, 0.72),
    "pinky": (0.72, 0.66, 0.6),
    "ring": (0.82, 0.76, 0.68),
    "thumb": (1.0, 0.9, 0.8),
}
_PALM_SEMI_AXES = (1.2, 4.3, 4.1)


@dataclass(frozen=True)
class SkinnedTemplate:
    """Canonical mesh with an optional joint tree.

    ``parents[0] == -1`` marks the root. Joints are stored in topological
    order (every parent precedes its children). Objects use zero joints.
    """

    vertices: np.ndarray
    faces: np.ndarray
    joints: np.ndarray
    parents: np.ndarray
    skin_weights: np.ndarray
    shape_basis: np.ndarray
    joint_shape_basis: np.ndarray
    handedness: str | None = None

    @property
    def n_joints(self) -> int:
        return self.joints.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def is_articulated(self) -> bool:
        return self.n_joints > 0

    def mean_edge_length(self) -> float:
        return mean_edge_length(self.vertices, self.faces)

    def validate(self) -> None:
        if self.parents.shape[0] != self.n_joints:
            raise DimensionMismatch("parents must have one entry per joint")
        if self.n_joints:
            if self.parents[0] != -1:
                raise DimensionMismatch("joint 0 must be the root")
            for j in range(1, self.n_joints):
                if not 0 <= self.parents[j] < j:
                    raise DimensionMismatch(f"joint {j} breaks topological order")
        if self.skin_weights.shape != (self.n_vertices, self.n_joints):
            raise DimensionMismatch("skin_weights must be V x J")
        if self.n_joints and not np.allclose(self.skin_weights.sum(axis=1), 1.0, atol=1e-6):
            raise DimensionMismatch("skin weight rows must sum to 1")


def mean_edge_length(vertices: np.ndarray, faces: np.ndarray) -> float:
    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    edges = np.unique(np.sort(edges, axis=1), axis=0)
    return float(np.mean(np.linalg.norm(vertices[edges[:, 0]] - vertices[edges[:, 1]], axis=1)))


def _orient_outward(vertices, faces):
    """Wind every face of a convex closed part so its normal points outward."""
    a, b, c = vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]
    normal = np.cross(b - a, c - a)
    outward = np.einsum("ij,ij->i", normal, (a + b + c) / 3 - vertices.mean(axis=0)) >= 0
    return np.where(outward[:, None], faces, faces[:, ::-1])


def _uv_ellipsoid(semi_axes, n_lat=8, n_lon=12):
    verts = [(0.0, 0.0, semi_axes[2])]
    for i in range(1, n_lat):
        polar = np.pi * i / n_lat
        for k in range(n_lon):
            az = 2 * np.pi * k / n_lon
            verts.append((np.sin(polar) * np.cos(az), np.sin(polar) * np.sin(az), np.cos(polar)))
    verts.append((0.0, 0.0, -1.0))
    verts = np.array(verts)
    verts[1:] *= semi_axes
    verts[0] = (0.0, 0.0, semi_axes[2])
    faces = []
    top, bottom = 0, len(verts) - 1
    ring = lambda i, k: 1 + (i - 1) * n_lon + (k % n_lon)  # noqa: E731
    for k in range(n_lon):
        faces.append((top, ring(1, k), ring(1, k + 1)))
        faces.append((bottom, ring(n_lat - 1, k + 1), ring(n_lat - 1, k)))
    for i in range(1, n_lat - 1):
        for k in range(n_lon):
            a, b, c, d = ring(i, k), ring(i, k + 1), ring(i + 1, k), ring(i + 1, k + 1)
            faces.append((a, c, b))
            faces.append((b, c, d))
    faces = np.array(faces, dtype=np.int64)
    return verts, _orient_outward(verts, faces)


def _tube(start, direction, length, radius, n_around=8, n_rings=4):
    """Closed capsule-like tube: rings along the axis plus two cap vertices."""
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    helper = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(d, helper)
    u /= np.linalg.norm(u)
    v = np.cross(d, u)
    fracs = np.linspace(0.0, 1.0, n_rings)
    verts, frac_of_vertex = [], []
    for f in fracs:
        for k in range(n_around):
            ang = 2 * np.pi * k / n_around
            verts.append(start + d * length * f + radius * (np.cos(ang) * u + np.sin(ang) * v))
            frac_of_vertex.append(f)
    verts.append(start - d * 0.35 * radius)
    frac_of_vertex.append(0.0)
    verts.append(start + d * (length + 0.6 * radius))
    frac_of_vertex.append(1.0)
    cap0, cap1 = len(verts) - 2, len(verts) - 1
    faces = []
    for r in range(n_rings - 1):
        for k in range(n_around):
            a = r * n_around + k
            b = r * n_around + (k + 1) % n_around
            c = (r + 1) * n_around + k
            e = (r + 1) * n_around + (k + 1) % n_around
            faces.append((a, b, c))
            faces.append((b, e, c))
    last = (n_rings - 1) * n_around
    for k in range(n_around):
        faces.append((cap0, (k + 1) % n_around, k))
        faces.append((cap1, last + k, last + (k + 1) % n_around))
    verts = np.array(verts)
    faces = np.array(faces, dtype=np.int64)
    return verts, _orient_outward(verts, faces), np.array(frac_of_vertex)


def make_toy_hand(handedness: str = "r") -> SkinnedTemplate:
    """Deterministic procedural hand: ellipsoid palm and 15 tube segments.

    The right hand's palm faces +x with fingers pointing along -y; the left
    hand is its mirror image across the x = 0 plane.
    """
    if handedness not in HANDS:
        raise ValueError(f"handedness must be 'l' or 'r', got {handedness!r}")
    n_joints = 1 + 3 * len(FINGERS)
    joints = np.zeros((n_joints, 3))
    parents = np.full(n_joints, -1, dtype=np.int64)
    joint_shape = np.zeros((n_joints, 3, N_SHAPE))

    palm_v, palm_f = _uv_ellipsoid(_PALM_SEMI_AXES)
    parts_v, parts_f = [palm_v], [palm_f]
    weights = [np.tile(np.eye(n_joints)[0], (len(palm_v), 1))]
    shape = [np.zeros((len(palm_v), 3, N_SHAPE))]
    offset = len(palm_v)

    for f, name in enumerate(FINGERS):
        base = np.array(_FINGER_BASE[name])
        d = np.array(_FINGER_DIR[name])
        d /= np.linalg.norm(d)
        lengths = _FINGER_LENGTHS[name]
        pos = base.copy()
        for s in range(3):
            j = 1 + 3 * f + s
            joints[j] = pos
            parents[j] = 0 if s == 0 else j - 1
            joint_shape[j, :, 1 + f] = np.dot(pos - base, d) * d
            v, faces, frac = _tube(pos, d, lengths[s], _FINGER_RADII[name][s])
            w = np.zeros((len(v), n_joints))
            blend = frac < 1e-9
            w[:, j] = np.where(blend, 0.5, 1.0)
            w[:, parents[j]] += np.where(blend, 0.5, 0.0)
            b = np.zeros((len(v), 3, N_SHAPE))
            b[:, :, 1 + f] = ((v - base) @ d)[:, None] * d
            parts_v.append(v)
            parts_f.append(faces + offset)
            weights.append(w)
            shape.append(b)
            offset += len(v)
            pos = pos + d * lengths[s]

    vertices = np.concatenate(parts_v)
    faces = np.concatenate(parts_f)
    skin = np.concatenate(weights)
    shape_basis = np.concatenate(shape)
    shape_basis[:, :, 0] = vertices
    joint_shape[:, :, 0] = joints

    if handedness == "l":
        flip = np.array([-1.0, 1.0, 1.0])
        vertices = vertices * flip
        joints = joints * flip
        shape_basis = shape_basis * flip[None, :, None]
        joint_shape = joint_shape * flip[None, :, None]
        faces = faces[:, ::-1].copy()

    template = SkinnedTemplate(vertices, faces, joints, parents, skin, shape_basis, joint_shape, handedness)
    template.validate()
    return template


def _object_template(vertices, faces) -> SkinnedTemplate:
    v = np.asarray(vertices, dtype=np.float64)
    return SkinnedTemplate(
        v, np.asarray(faces, dtype=np.int64), np.zeros((0, 3)), np.zeros(0, dtype=np.int64),
        np.zeros((len(v), 0)), np.zeros((len(v), 3, 0)), np.zeros((0, 3, 0)), None,
    )


def rigid_template(vertices, faces) -> SkinnedTemplate:
    """Wrap any closed mesh as an articulation-free object template."""
    return _object_template(vertices, faces)


def make_sphere(radius: float = 3.5, n_lat: int = 14, n_lon: int = 22) -> SkinnedTemplate:
    v, f = _uv_ellipsoid((radius, radius, radius), n_lat, n_lon)
    return _object_template(v, f)


def make_cylinder(radius: float = 3.0, height: float = 9.0, n_around: int = 20, n_rings: int = 12) -> SkinnedTemplate:
    """Closed cylinder with its axis along y, centred at the origin."""
    verts = []
    for r in range(n_rings):
        y = -height / 2 + height * r / (n_rings - 1)
        for k in range(n_around):
            ang = 2 * np.pi * k / n_around
            verts.append((radius * np.cos(ang), y, radius * np.sin(ang)))
    rings = 3
    cap_start = len(verts)
    for side, y in ((0, -height / 2), (1, height / 2)):
        for r in range(1, rings):
            rr = radius * (rings - r) / rings
            for k in range(n_around):
                ang = 2 * np.pi * k / n_around
                verts.append((rr * np.cos(ang), y, rr * np.sin(ang)))
        verts.append((0.0, y, 0.0))
    verts = np.array(verts)
    faces = []
    for r in range(n_rings - 1):
        for k in range(n_around):
            a, b = r * n_around + k, r * n_around + (k + 1) % n_around
            c, e = a + n_around, b + n_around
            faces.append((a, c, b))
            faces.append((b, c, e))
    per_cap = (rings - 1) * n_around + 1
    for side in range(2):
        first = cap_start + side * per_cap
        outer = 0 if side == 0 else (n_rings - 1) * n_around
        ring_ids = [np.arange(outer, outer + n_around)]
        for r in range(rings - 1):
            ring_ids.append(np.arange(first + r * n_around, first + (r + 1) * n_around))
        center = first + per_cap - 1
        for a_ring, b_ring in zip(ring_ids[:-1], ring_ids[1:]):
            for k in range(n_around):
                k1 = (k + 1) % n_around
                if side == 0:
                    faces.append((a_ring[k], a_ring[k1], b_ring[k]))
                    faces.append((a_ring[k1], b_ring[k1], b_ring[k]))
                else:
                    faces.append((a_ring[k], b_ring[k], a_ring[k1]))
                    faces.append((a_ring[k1], b_ring[k], b_ring[k1]))
        last = ring_ids[-1]
        for k in range(n_around):
            k1 = (k + 1) % n_around
            faces.append((center, last[k1], last[k]) if side == 0 else (center, last[k], last[k1]))
    faces = np.array(faces, dtype=np.int64)
    return _object_template(verts, _orient_outward(verts, faces))


def make_box(size=(6.0, 9.0, 5.0), divisions: int = 6) -> SkinnedTemplate:
    """Closed box with each face split into a regular grid."""
    size = np.asarray(size, dtype=np.float64)
    n = divisions
    grid = np.linspace(-0.5, 0.5, n + 1)
    index = {}
    verts = []

    def vid(p):
        key = tuple(np.round(p, 9))
        if key not in index:
            index[key] = len(verts)
            verts.append(p)
        return index[key]

    faces = []
    for axis in range(3):
        for sign in (-1.0, 1.0):
            a1, a2 = [a for a in range(3) if a != axis]
            for i in range(n):
                for k in range(n):
                    quad = []
                    for di, dk in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        p = np.zeros(3)
                        p[axis] = 0.5 * sign
                        p[a1] = grid[i + di]
                        p[a2] = grid[k + dk]
                        quad.append(vid(p * size))
                    tri = [(quad[0], quad[1], quad[2]), (quad[0], quad[2], quad[3])]
                    normal_sign = sign if (a1, a2) in ((1, 2), (2, 0), (0, 1)) else -sign
                    for t in tri:
                        faces.append(t if normal_sign > 0 else t[::-1])
    verts = np.array(verts)
    faces = np.array(faces, dtype=np.int64)
    return _object_template(verts, _orient_outward(verts, faces))


@dataclass
class ChainCache:
    theta: np.ndarray
    beta: np.ndarray
    local_rot: np.ndarray
    global_rot: np.ndarray
    global_trans: np.ndarray
    joints: np.ndarray


def forward_kinematics(template: SkinnedTemplate, theta, beta):
    """Per-joint skinning transforms (rotation, translation) and a cache."""
    nj = template.n_joints
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    if theta.size != 3 * (nj - 1) or beta.size != template.joint_shape_basis.shape[2]:
        raise DimensionMismatch(
            f"expected pose of size {3 * (nj - 1)} and shape of size {template.joint_shape_basis.shape[2]}, "
            f"got {theta.size} and {beta.size}"
        )
    joints = template.joints + template.joint_shape_basis @ beta
    local = np.empty((nj, 3, 3))
    local[0] = np.eye(3)
    local[1:] = axis_angle_to_matrix(theta.reshape(nj - 1, 3))
    g_rot = np.empty((nj, 3, 3))
    g_trans = np.empty((nj, 3))
    g_rot[0] = local[0]
    g_trans[0] = joints[0]
    for j in range(1, nj):
        p = template.parents[j]
        g_rot[j] = g_rot[p] @ local[j]
        g_trans[j] = g_rot[p] @ (joints[j] - joints[p]) + g_trans[p]
    a_rot = g_rot
    a_trans = g_trans - np.einsum("jab,jb->ja", g_rot, joints)
    return a_rot, a_trans, ChainCache(theta, beta, local, g_rot, g_trans, joints)


def forward_kinematics_backward(template: SkinnedTemplate, cache: ChainCache, g_arot, g_atrans):
    """Adjoint of :func:`forward_kinematics`; returns (d_theta, d_beta)."""
    nj = template.n_joints
    joints = cache.joints
    g_grot = g_arot - np.einsum("ja,jb->jab", g_atrans, joints)
    g_gtrans = g_atrans.copy()
    g_joints = -np.einsum("jab,ja->jb", cache.global_rot, g_atrans)
    g_local = np.zeros((nj, 3, 3))
    for j in range(nj - 1, 0, -1):
        p = template.parents[j]
        rp = cache.global_rot[p]
        g_grot[p] += g_grot[j] @ cache.local_rot[j].T + np.outer(g_gtrans[j], joints[j] - joints[p])
        g_local[j] = rp.T @ g_grot[j]
        back = rp.T @ g_gtrans[j]
        g_joints[j] += back
        g_joints[p] -= back
        g_gtrans[p] += g_gtrans[j]
    g_joints[0] += g_gtrans[0]
    g_theta = axis_angle_backward(cache.theta.reshape(nj - 1, 3), g_local[1:]).reshape(-1)
    g_beta = np.einsum("jck,jc->k", template.joint_shape_basis, g_joints)
    return g_theta, g_beta


@dataclass
class PoseCache:
    template: SkinnedTemplate
    points: np.ndarray
    shaped: np.ndarray
    weights: np.ndarray
    assoc: np.ndarray
    rot: np.ndarray
    trans: np.ndarray
    chain: ChainCache | None
    phi: np.ndarray
    gamma: np.ndarray
    articulated: np.ndarray


@dataclass
class PosedMesh:
    """Posed vertices; ``cache`` holds what :func:`lbs_backward` replays."""

    vertices: np.ndarray
    faces: np.ndarray | None = None
    cache: PoseCache | None = field(default=None, repr=False)


def pose_points(template: SkinnedTemplate, points, weights, assoc, theta, beta, phi, gamma):
    """Skin canonical points and place them in camera space.

    ``weights`` is N x J (template rows) or N x (J + 1), the extra column
    being a background channel bound to the identity transform. ``assoc``
    maps each point to the template vertex whose shape displacement it
    follows.
    """
    points = np.asarray(points, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64).reshape(3)
    gamma = np.asarray(gamma, dtype=np.float64).reshape(3)
    chain = None
    if template.is_articulated:
        beta = np.asarray(beta, dtype=np.float64).reshape(-1)
        a_rot, a_trans, chain = forward_kinematics(template, theta, beta)
        shaped = points + template.shape_basis[assoc] @ beta
        nj = template.n_joints
        if weights.shape[1] == nj + 1:
            a_rot = np.concatenate([a_rot, np.eye(3)[None]], axis=0)
            a_trans = np.concatenate([a_trans, np.zeros((1, 3))], axis=0)
        elif weights.shape[1] != nj:
            raise DimensionMismatch(f"weights have {weights.shape[1]} columns for a {nj}-joint template")
        blend_rot = np.einsum("nj,jab->nab", weights, a_rot)
        articulated = np.einsum("nab,nb->na", blend_rot, shaped) + weights @ a_trans
    else:
        if theta is not None and np.size(theta) or beta is not None and np.size(beta):
            raise DimensionMismatch("rigid templates take no pose or shape parameters")
        a_rot = a_trans = None
        shaped = points
        articulated = points
    r_phi = axis_angle_to_matrix(phi)
    posed = articulated @ r_phi.T + gamma
    cache = PoseCache(template, points, shaped, weights, assoc, a_rot, a_trans, chain, phi, gamma, articulated)
    return posed, cache


def pose_points_backward(cache: PoseCache, grad):
    """Gradients of pose_points w.r.t. every input, as a dict."""
    grad = np.asarray(grad, dtype=np.float64)
    template = cache.template
    r_phi = axis_angle_to_matrix(cache.phi)
    out = {
        "Gamma": grad.sum(axis=0),
        "Phi": axis_angle_backward(cache.phi, grad.T @ cache.articulated),
    }
    g_art = grad @ r_phi
    if template.is_articulated:
        w = cache.weights
        transformed = np.einsum("jab,nb->nja", cache.rot, cache.shaped) + cache.trans[None]
        out["weights"] = np.einsum("na,nja->nj", g_art, transformed)
        g_rot = np.einsum("nj,na,nb->jab", w, g_art, cache.shaped)
        g_trans = w.T @ g_art
        blend_rot = np.einsum("nj,jab->nab", w, cache.rot)
        g_shaped = np.einsum("nab,na->nb", blend_rot, g_art)
        nj = template.n_joints
        g_theta, g_beta = forward_kinematics_backward(template, cache.chain, g_rot[:nj], g_trans[:nj])
        g_beta = g_beta + np.einsum("nck,nc->k", template.shape_basis[cache.assoc], g_shaped)
        out["theta"] = g_theta
        out["beta"] = g_beta
        out["points"] = g_shaped
    else:
        out["points"] = g_art
    return out


def hand_canonical_mesh(template: SkinnedTemplate, theta, beta) -> PosedMesh:
    """Skinned template vertices in the hand's canonical frame (no global pose)."""
    if template.is_articulated:
        theta = np.asarray(theta, dtype=np.float64).reshape(-1)
        beta = np.asarray(beta, dtype=np.float64).reshape(-1)
        if theta.size != N_POSE or beta.size != N_SHAPE:
            raise DimensionMismatch(f"hand pose must be {N_POSE}-d and shape {N_SHAPE}-d")
    assoc = np.arange(template.n_vertices)
    posed, cache = pose_points(template, template.vertices, template.skin_weights, assoc, theta, beta, np.zeros(3), np.zeros(3))
    return PosedMesh(posed, template.faces, cache)


def lbs_backward(mesh: PosedMesh, grad_vertices):
    """Returns (d_theta, d_beta, d_phi, d_gamma, d_template_vertices)."""
    if mesh.cache is None:
        raise StateMismatch("posed mesh carries no forward cache")
    g = pose_points_backward(mesh.cache, grad_vertices)
    return g.get("theta"), g.get("beta"), g["Phi"], g["Gamma"], g["points"]


def to_camera(item, phi, gamma):
    """Place canonical points, a PosedMesh or a GaussianSet by (phi, gamma)."""
    phi = np.asarray(phi, dtype=np.float64).reshape(3)
    gamma = np.asarray(gamma, dtype=np.float64).reshape(3)
    r = axis_angle_to_matrix(phi)
    if isinstance(item, GaussianSet):
        quats = quat_multiply(np.broadcast_to(axis_angle_to_quat(phi), item.rotations.shape), item.rotations)
        return item.with_(centers=item.centers @ r.T + gamma, rotations=quats)
    if isinstance(item, PosedMesh):
        posed, cache = pose_points(
            _object_template(item.vertices, item.faces if item.faces is not None else np.zeros((0, 3), np.int64)),
            item.vertices, None, None, None, None, phi, gamma,
        )
        return PosedMesh(posed, item.faces, cache)
    return np.asarray(item, dtype=np.float64) @ r.T + gamma


def to_camera_gaussians_backward(gaussians: GaussianSet, phi, grad_centers, grad_rotations):
    """Gradients of :func:`to_camera` on a GaussianSet.

    Returns (d_centers, d_rotations, d_phi, d_gamma) w.r.t. the canonical set.
    """
    phi = np.asarray(phi, dtype=np.float64).reshape(3)
    r = axis_angle_to_matrix(phi)
    q_phi = np.broadcast_to(axis_angle_to_quat(phi), gaussians.rotations.shape)
    g_qphi, g_q = quat_multiply_backward(q_phi, gaussians.rotations, grad_rotations)
    g_phi = axis_angle_backward(phi, grad_centers.T @ gaussians.centers)
    g_phi = g_phi + axis_angle_to_quat_backward(phi, g_qphi.sum(axis=0))
    return grad_centers @ r, g_q, g_phi, grad_centers.sum(axis=0)


def gaussians_from_mesh(vertices, faces, color=(0.5, 0.5, 0.5), opacity: float = 0.5) -> GaussianSet:
    """One isotropic splat per vertex with scale set to half the mean edge length."""
    vertices = np.asarray(vertices, dtype=np.float64)
    n = len(vertices)
    colors = np.broadcast_to(np.asarray(color, dtype=np.float64), (n, 3)).copy()
    log_scale = np.log(mean_edge_length(vertices, faces) / 2.0)
    return GaussianSet(
        vertices.copy(),
        np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        np.full((n, 3), log_scale),
        np.full(n, float(logit(opacity))),
        colors,
    )


@dataclass(frozen=True)
class SurfacePattern:
    """Fixed face indices and barycentric weights for surface sampling."""

    faces: np.ndarray
    bary: np.ndarray


def surface_pattern(vertices, faces, n: int, seed: int = 0) -> SurfacePattern:
    """Area-weighted random surface samples, deterministic under ``seed``."""
    vertices = np.asarray(vertices, dtype=np.float64)
    a, b, c = vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]
    area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(faces), size=n, p=area / area.sum())
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    bary = np.stack([1 - s, s * (1 - r2), s * r2], axis=1)
    return SurfacePattern(chosen, bary)


def sample_surface(vertices, faces, pattern: SurfacePattern) -> np.ndarray:
    tri = np.asarray(vertices, dtype=np.float64)[faces[pattern.faces]]
    return np.einsum("nk,nkc->nc", pattern.bary, tri)
