"""Batch-averaged training objectives and their gradients.

Every ``*_grad`` function returns the derivative of the scalar loss with
respect to the prediction argument.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ScoreTargets:
    r_max: float = 1.0
    r_min: float = -1.0

    def __post_init__(self):
        if not -1.0 <= self.r_min < self.r_max <= 1.0:
            raise ValueError(f"need -1 <= r_min < r_max <= 1, got {self.r_min}, {self.r_max}")


def _check_pair(target, pred, ndim, what):
    target, pred = np.asarray(target), np.asarray(pred)
    if target.shape != pred.shape:
        raise ValueError(f"{what}: shape mismatch {target.shape} vs {pred.shape}")
    if target.ndim != ndim or target.shape[0] < 1:
        raise ValueError(f"{what}: expected a batch of rank {ndim}, got shape {target.shape}")
    return target, pred


def _mse(target, pred) -> float:
    diff = np.asarray(target, dtype=np.float64) - np.asarray(pred, dtype=np.float64)
    return float(np.mean(diff * diff))


def _mse_grad(target, pred):
    pred = np.asarray(pred)
    return (2.0 / pred.size) * (pred - np.asarray(target, dtype=pred.dtype))


def pixel_loss_spec(S, S_hat) -> float:
    """Autoencoder loss: mean squared error over a (b, h, w) spectrogram batch."""
    return _mse(*_check_pair(S, S_hat, 3, "pixel_loss_spec"))


def pixel_loss_spec_grad(S, S_hat):
    return _mse_grad(*_check_pair(S, S_hat, 3, "pixel_loss_spec"))


def pixel_loss_img(Y, Y_hat) -> float:
    """Generator pixel loss: mean squared error over a (b, c, h, w) image batch."""
    return _mse(*_check_pair(Y, Y_hat, 4, "pixel_loss_img"))


def pixel_loss_img_grad(Y, Y_hat):
    return _mse_grad(*_check_pair(Y, Y_hat, 4, "pixel_loss_img"))


def score_loss(r_target: float, r_hat) -> float:
    """Discriminator loss ``mean((r - r_hat_i)^2)`` against a constant target score."""
    r_hat = np.asarray(r_hat, dtype=np.float64).reshape(-1)
    if r_hat.size < 1:
        raise ValueError("score_loss: empty batch")
    diff = r_target - r_hat
    return float(np.mean(diff * diff))


def score_loss_grad(r_target: float, r_hat):
    r_hat = np.asarray(r_hat)
    return (2.0 / r_hat.size) * (r_hat - r_hat.dtype.type(r_target))


def adv_loss(r_max: float, r_hat) -> float:
    """Generator adversarial loss: the score loss against ``r_max``."""
    return score_loss(r_max, r_hat)


def adv_loss_grad(r_max: float, r_hat):
    return score_loss_grad(r_max, r_hat)


@dataclass
class AdvLossHistory:
    """Per-epoch averages of the generator's adversarial loss."""

    k: int = 20
    epoch_means: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"moving-average window must be >= 1, got {self.k}")
        self.epoch_means = [float(m) for m in self.epoch_means]

    def append(self, mean: float) -> None:
        self.epoch_means.append(float(mean))

    def priors(self, t: int) -> list[float]:
        """Epoch averages for epochs ``t-k+1 .. t-1`` (1-based), clipped to what exists."""
        if t - 1 > len(self.epoch_means):
            raise ValueError(f"history holds {len(self.epoch_means)} epochs, cannot serve epoch {t}")
        lo = max(1, t - self.k + 1)
        return self.epoch_means[lo - 1:t - 1]


def ma_adv_loss(current: float, history: AdvLossHistory, t: int) -> float:
    """Moving-average adversarial loss for epoch ``t`` (1-based).

    ``(current + sum of the k-1 previous epoch averages) / k``; during warm-up
    only the available epochs are averaged.
    """
    priors = history.priors(t)
    return math.fsum([float(current), *map(float, priors)]) / (len(priors) + 1)


def ma_adv_scale(history: AdvLossHistory, t: int) -> float:
    """d(ma_adv_loss)/d(current): earlier epochs are constants."""
    return 1.0 / (len(history.priors(t)) + 1)


def generator_total_loss(pixel: float, ma_adv: float, lam: float) -> float:
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    return pixel + lam * ma_adv
