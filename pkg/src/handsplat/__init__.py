"""Differentiable Gaussian splat reconstruction of two hands grasping an object."""

from .errors import HandSplatError
from .gaussians import GaussianSet
from .geometry import Camera, RigidTransform, Rotation
from .losses import LossReport, LossWeights
from .optim import OptimConfig
from .scene import AgentParams, FrameObservation, Scene

__all__ = [
    "AgentParams",
    "Camera",
    "FrameObservation",
    "GaussianSet",
    "HandSplatError",
    "LossReport",
    "LossWeights",
    "OptimConfig",
    "RigidTransform",
    "Rotation",
    "Scene",
]
