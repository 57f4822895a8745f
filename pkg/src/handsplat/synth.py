"""Synthetic two-hand grasp scenes with known ground truth.

Ground-truth images are rendered with the same splat pipeline used for
fitting, from template-vertex splats with textured colors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .articulated import AGENTS, HANDS, N_POSE, N_SHAPE, make_box, make_cylinder, make_sphere, make_toy_hand
from .fileio import quantize
from .geometry import Camera
from .optim import OptimConfig
from .scene import AgentParams, FrameObservation, Scene
from .training import make_agent_state, render_agents

OBJECTS = {
    "box": lambda: make_box((6.0, 8.0, 5.0)),
    "cylinder": lambda: make_cylinder(3.0, 8.0),
    "sphere": lambda: make_sphere(3.2),
}
# half-width of each object along the grasp axis
_OBJECT_HALF_WIDTH = {"box": 3.0, "cylinder": 3.0, "sphere": 3.2}
NOISE_PRESETS = {
    "none": {"gamma": 0.0, "theta": 0.0},
    "standard": {"gamma": 2.0, "theta": 0.1},
}
MOTIONS = ("hold", "approach")
SKIN = np.array([0.86, 0.64, 0.52])
OBJECT_COLOR = np.array([0.25, 0.5, 0.85])
DEPTH = 60.0
FOCAL_PER_PIXEL = 1.875
# palm-center to object-center distance at contact (slightly inside the
# touching distance, as a firm grip compresses the palm)
GRIP_GAP = 0.5


@dataclass
class SyntheticScene:
    scene: Scene | None
    templates: dict
    gt_params: dict
    gt_colors: dict
    object_kind: str
    seed: int
    noise: str
    motion: str

    def gt_states(self, config: OptimConfig | None = None) -> dict:
        config = config or OptimConfig()
        return {a: make_agent_state(a, self.templates[a], self.gt_params[a], self.gt_colors[a], config)
                for a in AGENTS}


def make_camera(size: int) -> Camera:
    f = FOCAL_PER_PIXEL * size
    return Camera(f, f, size / 2.0, size / 2.0, size, size)


def _texture(points, rng, base, amplitude) -> np.ndarray:
    freq = rng.normal(0.0, 0.35, size=(3, 3))
    phase = rng.uniform(0, 2 * np.pi, size=3)
    wave = np.sin(points @ freq + phase)
    return np.clip(base + amplitude * wave, 0.0, 1.0)


def _finger_curl(curl: float, hand: str) -> np.ndarray:
    """Pose vector curling every finger joint about the palm-normal-crossing axis."""
    theta = np.zeros((15, 3))
    sign = 1.0 if hand == "r" else -1.0
    for finger in range(5):
        amount = 0.35 if finger == 4 else 1.0
        theta[finger * 3:(finger + 1) * 3, 2] = sign * curl * amount
    return theta.reshape(-1)


def _smooth(s):
    return s * s * (3 - 2 * s)


def ground_truth_params(n_frames: int, object_kind: str, motion: str, rng) -> dict:
    if motion not in MOTIONS:
        raise ValueError(f"unknown motion preset {motion!r}; choose from {MOTIONS}")
    s = np.linspace(0.0, 1.0, n_frames) if n_frames > 1 else np.ones(1)
    obj_phi = np.stack([0.15 * s, 0.5 * s - 0.25, 0.05 * np.sin(2 * s)], axis=1)
    obj_gamma = np.stack([0.8 * np.sin(np.pi * s), -0.6 + 1.2 * s, np.full_like(s, DEPTH)], axis=1)
    grip = _OBJECT_HALF_WIDTH[object_kind] + GRIP_GAP
    if motion == "approach":
        reach = grip + 3.0 * (1.0 - _smooth(np.clip(s / 0.6, 0.0, 1.0)))
        curl = 0.6 * _smooth(np.clip(s / 0.6, 0.0, 1.0))
    else:
        reach = np.full_like(s, grip)
        curl = 0.35 + 0.25 * s
    tilt = 0.45
    params = {"o": AgentParams.rigid(obj_phi, obj_gamma)}
    beta_scale = 0.03
    for hand in HANDS:
        side = -1.0 if hand == "r" else 1.0
        beta = np.tile(rng.normal(0.0, beta_scale, N_SHAPE), (n_frames, 1))
        phi = np.tile([0.0, tilt if hand == "r" else -tilt, 0.0], (n_frames, 1))
        gamma = obj_gamma + np.stack([side * reach, np.full_like(s, 3.5), np.zeros_like(s)], axis=1)
        theta = np.stack([_finger_curl(c, hand) for c in curl])
        theta += rng.normal(0.0, 0.02, size=theta.shape)
        params[hand] = AgentParams(phi, gamma, theta, beta)
    return params


def perturb(params: dict, noise: str, rng) -> dict:
    if noise not in NOISE_PRESETS:
        raise ValueError(f"unknown noise preset {noise!r}; choose from {sorted(NOISE_PRESETS)}")
    sigma = NOISE_PRESETS[noise]
    out = {}
    for a in AGENTS:
        p = params[a].copy()
        if sigma["gamma"]:
            p.gamma = p.gamma + rng.normal(0.0, sigma["gamma"], p.gamma.shape)
        if sigma["theta"] and p.theta.size:
            p.theta = p.theta + rng.normal(0.0, sigma["theta"], p.theta.shape)
        out[a] = p
    return out


def synth_generate(seed: int = 0, n_frames: int = 10, size: int = 128, object_kind: str = "box",
                   noise: str = "standard", motion: str = "hold") -> SyntheticScene:
    """Build, animate and render a synthetic scene entirely in memory."""
    if n_frames < 1:
        raise ValueError("a scene needs at least one frame")
    if object_kind not in OBJECTS:
        raise ValueError(f"unknown object {object_kind!r}; choose from {sorted(OBJECTS)}")
    rng = np.random.default_rng(seed)
    templates = {"l": make_toy_hand("l"), "r": make_toy_hand("r"), "o": OBJECTS[object_kind]()}
    colors = {
        "l": _texture(templates["l"].vertices, rng, SKIN, 0.06),
        "r": _texture(templates["r"].vertices, rng, SKIN, 0.06),
        "o": _texture(templates["o"].vertices, rng, OBJECT_COLOR, 0.15),
    }
    gt = ground_truth_params(n_frames, object_kind, motion, rng)
    init = perturb(gt, noise, rng)
    camera = make_camera(size)
    synthetic = SyntheticScene(None, templates, gt, colors, object_kind, seed, noise, motion)
    states = synthetic.gt_states()
    frames = []
    for t in range(n_frames):
        image = render_agents(states, camera, t)
        masks = {a: (image.set_weight[..., k] > 0.5).astype(np.float64) for k, a in enumerate(AGENTS)}
        frames.append(FrameObservation(quantize(image.rgb), masks, camera, t))
    meta = {"seed": seed, "object": object_kind, "noise": noise, "motion": motion}
    synthetic.scene = Scene(camera, frames, templates, init, None, meta)
    return synthetic
