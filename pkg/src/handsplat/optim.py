"""Adam with per-group learning rates and the center learning-rate schedule."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import NonFiniteGradient, OutOfRange, ShapeMismatch
from .losses import LossWeights


@dataclass
class OptimConfig:
    """Optimization hyper-parameters.

    Learning rates are quoted in meter units. ``spatial_lr_scale`` converts
    them to the centimeter scenes used here; it multiplies the center
    schedule and the hand translation rate only.
    """

    lr_center_start: float = 1.6e-4
    lr_center_end: float = 1.6e-6
    lr_other: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    spatial_lr_scale: float = 100.0
    single_iters: int = 2000
    joint_fraction: float = 0.1
    joint_iters: int | None = None
    # frames rendered per iteration; 0 means every frame
    single_batch: int = 1
    joint_batch: int = 0
    seed: int = 0
    warm_start_iters: int = 300
    warm_start_lr: float = 1e-2
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        for name in ("lr_center_start", "lr_center_end", "eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lr_other < 0 or self.spatial_lr_scale <= 0:
            raise ValueError("learning rates must be non-negative and the spatial scale positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.single_batch < 0 or self.joint_batch < 0:
            raise ValueError("batch sizes must be non-negative")
        if self.single_iters < 0 or (self.joint_iters is not None and self.joint_iters < 0):
            raise ValueError("iteration counts must be non-negative")

    @property
    def n_joint_iters(self) -> int:
        if self.joint_iters is not None:
            return self.joint_iters
        return int(round(self.joint_fraction * self.single_iters))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = self.weights.as_dict()
        return d

    @classmethod
    def from_dict(cls, data: dict, base: OptimConfig | None = None) -> OptimConfig:
        """Build a config from ``data`` on top of ``base`` (defaults if None).

        Loss weights may be given flat or nested under "weights".
        """
        merged = (base or cls()).to_dict()
        weight_names = set(merged["weights"])
        known = {f.name for f in fields(cls)}
        for key, value in data.items():
            if key == "weights":
                if not isinstance(value, dict):
                    raise ValueError("config field 'weights' must be an object")
                for wk, wv in value.items():
                    if wk not in weight_names:
                        raise ValueError(f"unknown loss weight {wk!r}")
                    merged["weights"][wk] = wv
            elif key in weight_names:
                merged["weights"][key] = value
            elif key in known:
                merged[key] = value
            else:
                raise ValueError(f"unknown config key {key!r}")
        return cls(**merged)


def lr_schedule(step: int, config: OptimConfig, total: int | None = None) -> float:
    """Center learning rate (meter units) at ``step`` of ``total`` iterations.

    Log-linear decay from ``lr_center_start`` at step 0 to ``lr_center_end``
    at the last step.
    """
    total = config.single_iters if total is None else total
    if total < 1 or not 0 <= step < total:
        raise OutOfRange(f"step {step} outside [0, {total})")
    if total == 1:
        return config.lr_center_start
    t = step / (total - 1)
    if t == 1.0:
        return config.lr_center_end
    return float(config.lr_center_start * (config.lr_center_end / config.lr_center_start) ** t)


def adam_step(param, grad, m, v, t: int, lr: float, beta1=0.9, beta2=0.999, eps=1e-8, name: str = "param"):
    """One bias-corrected Adam update at step ``t`` (1-based).

    Returns new (param, m, v); inputs are not modified.
    """
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != param.shape or m.shape != param.shape or v.shape != param.shape:
        raise ShapeMismatch(f"{name}: parameter {param.shape}, gradient {grad.shape}, moments {m.shape}/{v.shape}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
    m = beta1 * m + (1 - beta1) * grad
    v = beta2 * v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    """Dense Adam over a dict of named arrays, updated in place."""

    def __init__(self, params: dict, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict, lrs: dict, masks: dict | None = None) -> None:
        """Apply one update to every parameter that has a gradient.

        ``masks`` optionally maps names to arrays broadcastable to the
        parameter; masked-out entries keep their value and moments.
        """
        for name, g in grads.items():
            if name in self.params and not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            new_p, m, v = adam_step(p, g, self.m[name], self.v[name], self.t, lrs[name],
                                    self.beta1, self.beta2, self.eps, name)
            mask = None if masks is None else masks.get(name)
            if mask is not None:
                mask = np.broadcast_to(np.asarray(mask, dtype=bool), p.shape)
                new_p = np.where(mask, new_p, p)
                m = np.where(mask, m, self.m[name])
                v = np.where(mask, v, self.v[name])
            p[...] = new_p
            self.m[name], self.v[name] = m, v

    def state(self) -> dict:
        out = {"t": np.array([self.t], dtype=np.int64)}
        for k in self.params:
            out[f"m/{k}"] = self.m[k]
            out[f"v/{k}"] = self.v[k]
        return out

    def load_state(self, state: dict) -> None:
        self.t = int(np.asarray(state["t"]).reshape(-1)[0])
        for k in self.params:
            self.m[k] = np.array(state[f"m/{k}"], dtype=np.float64)
            self.v[k] = np.array(state[f"v/{k}"], dtype=np.float64)
