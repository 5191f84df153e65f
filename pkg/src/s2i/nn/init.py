from __future__ import annotations

import math

import numpy as np


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0) / math.sqrt(fan_in + fan_out)


def xavier_init(fan_in: int, fan_out: int, rng: np.random.Generator, shape=None, dtype=np.float32):
    """Glorot "normalized initialization": U(-sqrt(6)/sqrt(n_in + n_out), +...).

    ``shape`` defaults to ``(fan_out, fan_in)``.
    """
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"fan_in and fan_out must be >= 1, got {fan_in}, {fan_out}")
    bound = xavier_bound(fan_in, fan_out)
    if shape is None:
        shape = (fan_out, fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
