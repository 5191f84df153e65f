"""Finite-difference suite over every layer kind and every training loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses
from .eval import nll_loss, nll_loss_grad
from .nn import (Activation, BatchNorm, ConcatSkip, Conv2d, DenseBlock, Dropout, Flatten, Linear, RngState, Tile,
                 Upsample, UpsampleConv2d, gradcheck)
from .nn.gradcheck import TOLERANCE, numeric_gradient, relative_error
from .nn.layers import ACTIVATIONS


@dataclass(frozen=True)
class SuiteRow:
    name: str
    max_error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def layer_cases(seed: int = 0):
    """``(name, module, input, train)`` at tiny float64 shapes."""
    rng = RngState(seed)
    data = np.random.default_rng([seed, 99])
    f64 = np.float64

    def x(*shape):
        return data.standard_normal(shape)

    cases = [
        ("conv2d", Conv2d(3, 4, 3, 1, rng=rng.next("init"), dtype=f64), x(2, 3, 5, 5), True),
        ("conv2d_stride2", Conv2d(3, 4, 3, 2, rng=rng.next("init"), dtype=f64), x(2, 3, 6, 5), True),
        ("conv2d_narrowing", Conv2d(6, 2, 3, 1, rng=rng.next("init"), dtype=f64), x(2, 6, 4, 4), True),
        ("upsample_conv2d", UpsampleConv2d(3, 2, 3, 2, (5, 7), rng=rng.next("init"), dtype=f64), x(2, 3, 3, 4), True),
        ("upsample", Upsample(2, (5, 6)), x(2, 2, 3, 3), True),
        ("fully_connected", Linear(6, 4, rng.next("init"), f64), x(3, 6), True),
        ("batch_norm_2d", BatchNorm(4, dtype=f64), x(5, 4), True),
        ("batch_norm_4d_train", BatchNorm(3, dtype=f64), x(3, 3, 2, 2), True),
        ("batch_norm_4d_eval", BatchNorm(3, dtype=f64), x(3, 3, 2, 2), False),
        ("dropout_train", Dropout(0.5), x(3, 5), True),
        ("dropout_at_eval", Dropout(0.3, at_eval=True), x(3, 5), False),
        ("flatten", Flatten(), x(2, 2, 3, 3), True),
        ("tile", Tile((3, 2)), x(2, 4), True),
        ("concat_skip", ConcatSkip(), [x(2, 2, 3, 3), x(2, 3, 3, 3)], True),
        ("dense_block", DenseBlock(3, 2, 2, "leaky_relu", rng=rng.next("init"), dtype=f64), x(2, 3, 4, 4), True),
    ]
    for fn in ACTIVATIONS:
        inp = x(3, 5) if fn == "log_softmax" else x(2, 3, 3, 3)
        # keep ReLU-family inputs away from the kink where differences are undefined
        if fn in ("relu", "leaky_relu", "elu"):
            inp = inp + np.sign(inp) * 0.05
        cases.append((f"activation_{fn}", Activation(fn), inp, True))
    return cases


def _loss_check(name, loss, grad, target, pred, h=1e-5) -> SuiteRow:
    pred = np.array(pred, dtype=np.float64)
    numeric = numeric_gradient(lambda: loss(target, pred), pred, h)
    return SuiteRow(name, relative_error(grad(target, pred), numeric))


def loss_cases(seed: int = 0) -> list[SuiteRow]:
    data = np.random.default_rng([seed, 98])
    rows = [
        _loss_check("loss_pixel_spec", losses.pixel_loss_spec, losses.pixel_loss_spec_grad,
                    data.uniform(-1, 1, (2, 4, 3)), data.uniform(-1, 1, (2, 4, 3))),
        _loss_check("loss_pixel_img", losses.pixel_loss_img, losses.pixel_loss_img_grad,
                    data.uniform(-1, 1, (2, 3, 3, 3)), data.uniform(-1, 1, (2, 3, 3, 3))),
        _loss_check("loss_score", losses.score_loss, losses.score_loss_grad, -1.0, data.uniform(-1, 1, 6)),
        _loss_check("loss_adv", losses.adv_loss, losses.adv_loss_grad, 1.0, data.uniform(-1, 1, 6)),
    ]
    history = losses.AdvLossHistory(3, list(data.uniform(0, 2, 4)))
    t = 5

    def ma(target, pred):
        return losses.ma_adv_loss(losses.adv_loss(target, pred), history, t)

    def ma_grad(target, pred):
        return losses.adv_loss_grad(target, pred) * losses.ma_adv_scale(history, t)

    rows.append(_loss_check("loss_ma_adv", ma, ma_grad, 1.0, data.uniform(-1, 1, 6)))

    def total(target, pred):
        img, r = pred[:12].reshape(1, 3, 2, 2), pred[12:]
        return losses.generator_total_loss(losses.pixel_loss_img(target, img), ma(1.0, r), 0.1)

    def total_grad(target, pred):
        img, r = pred[:12].reshape(1, 3, 2, 2), pred[12:]
        return np.concatenate([losses.pixel_loss_img_grad(target, img).ravel(), 0.1 * ma_grad(1.0, r)])

    rows.append(_loss_check("loss_generator_total", total, total_grad, data.uniform(-1, 1, (1, 3, 2, 2)),
                            data.uniform(-1, 1, 16)))
    labels = data.integers(0, 2, 5)
    logits = data.standard_normal((5, 2))
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    rows.append(_loss_check("loss_nll", lambda y, p: nll_loss(p, y), lambda y, p: nll_loss_grad(p, y), labels, logp))
    return rows


def gradient_suite(seed: int = 0) -> list[SuiteRow]:
    rows = []
    for name, module, x, train in layer_cases(seed):
        report = gradcheck(module, x, seed=seed, train=train)
        rows.append(SuiteRow(name, report.max_error))
    return rows + loss_cases(seed)


def format_table(rows: list[SuiteRow]) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{'check':<{width}}  {'max_rel_err':>12}  result"]
    lines += [f"{r.name:<{width}}  {r.max_error:12.3e}  {'pass' if r.passed else 'FAIL'}" for r in rows]
    return "\n".join(lines)
