"""
Adam optimizer and the step learning-rate schedule.
"""

from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from svtnet.config import TrainConfig

BETA1 = 0.9
BETA2 = 0.999
EPSILON = 1e-8


class NonFiniteGradientError(ValueError):
    pass


@dataclass
class OptimState:
    """Adam moments per parameter name plus the step counter."""

    first: Dict[str, np.ndarray] = field(default_factory=dict)
    second: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPSILON

    @classmethod
    def for_params(cls, params: Dict[str, np.ndarray]) -> "OptimState":
        return cls(
            first={name: np.zeros_like(a) for name, a in params.items()},
            second={name: np.zeros_like(a) for name, a in params.items()},
        )


def learning_rate(config: TrainConfig, epoch: int) -> float:
    """
    Scheduled rate for a 0-based epoch: lr until the decay epoch, lr * lr_decay after.

    With the baseline profile, epoch index 30 (the 31st epoch) runs at 1e-4.
    """
    if epoch >= config.lr_decay_epoch:
        return config.lr * config.lr_decay
    return config.lr


def adam_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: OptimState,
    lr: float,
) -> None:
    """
    One bias-corrected Adam update, applied in place.

    All gradients are checked before any parameter changes.

    Raises:
        NonFiniteGradientError: Naming the first parameter with a NaN/inf gradient
        ValueError: If a gradient shape does not match its parameter
    """
    for name, param in params.items():
        grad = grads[name]
        if grad.shape != param.shape:
            raise ValueError(
                f"gradient for '{name}' has shape {grad.shape}, expected {param.shape}"
            )
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter '{name}'")

    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1**t
    correction2 = 1.0 - state.beta2**t
    for name, param in params.items():
        grad = grads[name]
        m = state.first.setdefault(name, np.zeros_like(param))
        v = state.second.setdefault(name, np.zeros_like(param))
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        param -= lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
