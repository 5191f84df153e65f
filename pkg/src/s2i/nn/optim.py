from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}; step aborted")
        self.name = name


@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    steps: int = 0


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState) -> None:
    """In-place SGD with momentum: ``v = mu*v + g + wd*p``; ``p -= lr*v``.

    Every gradient is checked before any parameter moves, so a non-finite
    gradient leaves params and velocities untouched.
    """
    for name, grad in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if grad.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {grad.shape} != parameter shape {params[name].shape}")
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradientError(name)
    for name, grad in grads.items():
        param = params[name]
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(param)
        v *= state.momentum
        v += grad
        if state.weight_decay:
            v += state.weight_decay * param
        param -= state.learning_rate * v
    state.steps += 1
