"""The optimizable splat cloud of a single agent."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionMismatch


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class GaussianSet:
    """N anisotropic Gaussians.

    Attributes are stored in their unconstrained form: scales as logs and
    opacities as logits. Colors are plain RGB and get clamped at render time.
    """

    centers: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        fields = {
            "centers": (3,),
            "rotations": (4,),
            "log_scales": (3,),
            "opacity_logits": (),
            "colors": (3,),
        }
        n = None
        for name, tail in fields.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim == 1 and tail and arr.size == 0:
                arr = arr.reshape((0,) + tail)
            if arr.shape[1:] != tail:
                raise DimensionMismatch(f"{name} must have shape (N, {', '.join(map(str, tail))}), got {arr.shape}")
            if n is None:
                n = arr.shape[0]
            elif arr.shape[0] != n:
                raise DimensionMismatch(f"{name} has {arr.shape[0]} rows, expected {n}")
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return self.centers.shape[0]

    @classmethod
    def empty(cls) -> GaussianSet:
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)))

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def with_(self, **changes) -> GaussianSet:
        return replace(self, **changes)

    def subset(self, index) -> GaussianSet:
        return GaussianSet(
            self.centers[index],
            self.rotations[index],
            self.log_scales[index],
            self.opacity_logits[index],
            self.colors[index],
        )

    def as_array(self) -> np.ndarray:
        """Pack to an (N, 14) array in PLY property order."""
        return np.concatenate(
            [self.centers, self.rotations, self.log_scales, self.opacity_logits[:, None], self.colors], axis=1
        )

    @classmethod
    def from_array(cls, packed: np.ndarray) -> GaussianSet:
        packed = np.asarray(packed, dtype=np.float64).reshape(-1, 14)
        return cls(packed[:, 0:3], packed[:, 3:7], packed[:, 7:10], packed[:, 10], packed[:, 11:14])


def concat(sets) -> GaussianSet:
    sets = list(sets)
    if not sets:
        return GaussianSet.empty()
    return GaussianSet.from_array(np.concatenate([s.as_array() for s in sets], axis=0))


@dataclass
class SplatGradients:
    """Gradients w.r.t. every attribute family of one GaussianSet."""

    centers: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> SplatGradients:
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n), np.zeros((n, 3)))

    def __len__(self) -> int:
        return self.centers.shape[0]

    def as_array(self) -> np.ndarray:
        return np.concatenate(
            [self.centers, self.rotations, self.log_scales, self.opacity_logits[:, None], self.colors], axis=1
        )

    def all_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.as_array())))
