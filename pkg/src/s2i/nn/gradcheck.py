"""Central finite-difference checks of analytic backward passes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .layers import Context, Module
from .rng import RngState

TOLERANCE = 1e-4


@dataclass
class GradcheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return all(err < self.tolerance for err in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def rows(self):
        for name, err in self.errors.items():
            yield name, err, "pass" if err < self.tolerance else "FAIL"


def relative_error(analytic, numeric, floor=1e-7) -> float:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom, initial=0.0))


def numeric_gradient(f: Callable[[], float], array: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``array`` (mutated in place)."""
    grad = np.zeros(array.shape, dtype=np.float64)
    flat = array.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = f()
        flat[i] = orig - h
        minus = f()
        flat[i] = orig
        grad.reshape(-1)[i] = (plus - minus) / (2 * h)
    return grad


def gradcheck(
    module: Module,
    x,
    loss_fn: Callable | None = None,
    seed: int = 0,
    train: bool = True,
    h: float = 1e-5,
    tolerance: float = TOLERANCE,
    check_input: bool = True,
) -> GradcheckReport:
    """Compare ``module.backward`` against finite differences of ``loss_fn(module(x))``.

    ``loss_fn(out)`` returns ``(loss, dloss/dout)``; the default is a fixed
    random projection ``sum(out * R)``.  Dropout masks are replayed from the
    same seed on every evaluation so the function being differenced is fixed.
    The module should hold float64 parameters.
    """
    inputs = x if isinstance(x, (list, tuple)) else None

    def make_ctx():
        return Context(train=train, rng=RngState(seed), update_stats=False)

    out, _ = module.forward(x, make_ctx())
    if loss_fn is None:
        proj = np.random.default_rng(seed + 1).standard_normal(out.shape)

        def loss_fn(o):
            return float(np.sum(o * proj)), proj

    def scalar():
        return loss_fn(module.forward(x, make_ctx())[0])[0]

    out, cache = module.forward(x, make_ctx())
    _, dout = loss_fn(out)
    dx, grads = module.backward(np.asarray(dout, dtype=out.dtype), cache)

    report = GradcheckReport(tolerance=tolerance)
    params = dict(module.named_params())
    for name, analytic in grads.items():
        report.errors[name] = relative_error(analytic, numeric_gradient(scalar, params[name], h))
    if check_input:
        if inputs is not None:
            for i, (xi, dxi) in enumerate(zip(inputs, dx)):
                report.errors[f"input{i}"] = relative_error(dxi, numeric_gradient(scalar, xi, h))
        else:
            report.errors["input"] = relative_error(dx, numeric_gradient(scalar, x, h))
    return report
