"""In-memory scene: camera, observed frames, templates and per-frame agent parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .articulated import AGENTS, N_POSE, N_SHAPE, SkinnedTemplate
from .errors import DimensionMismatch, MissingAgent
from .geometry import Camera


@dataclass
class FrameObservation:
    """One observed frame; masks are float arrays holding 0 or 1."""

    image: np.ndarray
    masks: dict
    camera: Camera
    index: int = 0

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        h, w = self.image.shape[:2]
        if self.image.shape != (h, w, 3):
            raise DimensionMismatch(f"frame {self.index}: image must be H x W x 3, got {self.image.shape}")
        if (w, h) != (self.camera.width, self.camera.height):
            raise DimensionMismatch(f"frame {self.index}: image is {w}x{h}, camera expects {self.camera.width}x{self.camera.height}")
        for agent in AGENTS:
            if agent not in self.masks:
                raise MissingAgent(f"frame {self.index}: no mask for agent {agent!r}")
            m = np.asarray(self.masks[agent], dtype=np.float64)
            if m.shape != (h, w):
                raise DimensionMismatch(f"frame {self.index}: mask {agent!r} is {m.shape[::-1]}, image is {(w, h)}")
            self.masks[agent] = m

    @property
    def merged(self) -> np.ndarray:
        return np.clip(sum(self.masks[a] for a in AGENTS), 0.0, 1.0)


@dataclass
class AgentParams:
    """Per-frame global orientation, translation, pose and shape of one agent."""

    phi: np.ndarray
    gamma: np.ndarray
    theta: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=np.float64).reshape(-1, 3)
        t = len(self.phi)
        self.gamma = np.asarray(self.gamma, dtype=np.float64).reshape(t, 3)
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(t, -1)
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(t, -1)
        if self.theta.shape[1] not in (0, N_POSE) or self.beta.shape[1] not in (0, N_SHAPE):
            raise DimensionMismatch(f"pose/shape must be {N_POSE}/{N_SHAPE}-d or empty")

    def __len__(self) -> int:
        return len(self.phi)

    @classmethod
    def rigid(cls, phi, gamma) -> AgentParams:
        phi = np.asarray(phi, dtype=np.float64).reshape(-1, 3)
        return cls(phi, gamma, np.zeros((len(phi), 0)), np.zeros((len(phi), 0)))

    def copy(self) -> AgentParams:
        return AgentParams(self.phi.copy(), self.gamma.copy(), self.theta.copy(), self.beta.copy())

    def frame(self, t: int) -> dict:
        return {"phi": self.phi[t], "gamma": self.gamma[t], "theta": self.theta[t], "beta": self.beta[t]}


@dataclass
class Scene:
    camera: Camera
    frames: list
    templates: dict
    init_params: dict
    root: str | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for agent in AGENTS:
            if agent not in self.templates or agent not in self.init_params:
                raise MissingAgent(f"scene lacks agent {agent!r}")
            if len(self.init_params[agent]) != len(self.frames):
                raise DimensionMismatch(
                    f"agent {agent!r} has {len(self.init_params[agent])} parameter frames for {len(self.frames)} images"
                )

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def template(self, agent: str) -> SkinnedTemplate:
        return self.templates[agent]
