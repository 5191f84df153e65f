import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from s2i import losses
from s2i.diagnostics import loss_cases
from s2i.losses import AdvLossHistory, ScoreTargets

from .oracles import ma_loss_loops, mse_loops, score_loss_loops

unit = st.integers(-64, 64).map(lambda i: i / 64)


def test_pixel_spec_examples():
    S = np.array([[[1.0, -1.0]]])
    assert losses.pixel_loss_spec(S, S) == 0
    assert losses.pixel_loss_spec(S, np.zeros_like(S)) == pytest.approx(1.0)


def test_pixel_spec_matches_loop_oracle(rng):
    S, S_hat = rng.uniform(-1, 1, (2, 4, 10, 12))
    assert abs(losses.pixel_loss_spec(S, S_hat) - mse_loops(S, S_hat)) < 1e-7


def test_pixel_img_examples(rng):
    assert losses.pixel_loss_img(np.ones((1, 1, 1, 1)), np.zeros((1, 1, 1, 1))) == pytest.approx(1.0)
    Y, Y_hat = rng.uniform(-1, 1, (2, 2, 3, 8, 8))
    assert losses.pixel_loss_img(Y, Y) == 0
    assert abs(losses.pixel_loss_img(Y, Y_hat) - mse_loops(Y, Y_hat)) < 1e-7


def test_score_loss_examples(rng):
    assert losses.score_loss(0.3, np.full(4, 0.3)) == 0
    assert losses.score_loss(1.0, np.array([0.5, -0.5])) == pytest.approx(1.25)
    r = rng.uniform(-1, 1, 64)
    assert abs(losses.score_loss(-1.0, r) - score_loss_loops(-1.0, r)) < 1e-9


def test_adv_loss_examples(rng):
    assert losses.adv_loss(1.0, np.ones(3)) == 0
    assert losses.adv_loss(1.0, np.zeros(2)) == pytest.approx(1.0)
    for _ in range(10):
        r = rng.uniform(-1, 1, 17)
        assert losses.adv_loss(1.0, r) == losses.score_loss(1.0, r)


def test_ma_adv_examples():
    assert losses.ma_adv_loss(0.7, AdvLossHistory(1, [0.1, 0.2]), 3) == 0.7
    assert losses.ma_adv_loss(0.9, AdvLossHistory(3, [0.6, 0.3]), 3) == pytest.approx(0.6)
    # first epoch has no history
    assert losses.ma_adv_loss(0.4, AdvLossHistory(20), 1) == 0.4


def test_ma_adv_matches_rolling_window_oracle(rng):
    means = list(rng.uniform(0, 3, 100))
    for k in (1, 5, 20, 150):
        hist = AdvLossHistory(k, means)
        for t in range(1, 101):
            cur = float(rng.uniform(0, 3))
            assert abs(losses.ma_adv_loss(cur, hist, t) - ma_loss_loops(cur, means, t, k)) < 1e-12


def test_ma_adv_float_precision(rng):
    for dtype, tol in ((np.float32, 1e-7), (np.float64, 1e-12)):
        for _ in range(100):
            means = rng.uniform(0, 2, 30).astype(dtype)
            cur = dtype(rng.uniform(0, 2))
            got = losses.ma_adv_loss(cur, AdvLossHistory(7, list(means)), 31)
            want = ma_loss_loops(float(cur), [float(m) for m in means], 31, 7)
            assert abs(got - want) <= tol * max(1.0, abs(want))


@given(st.floats(0, 10, allow_nan=False), st.integers(1, 30), st.integers(1, 40))
def test_ma_adv_constant_fixed_point(c, k, t):
    assert losses.ma_adv_loss(c, AdvLossHistory(k, [c] * (t - 1)), t) == pytest.approx(c, rel=1e-12, abs=1e-12)


def test_ma_history_errors():
    with pytest.raises(ValueError):
        AdvLossHistory(0)
    with pytest.raises(ValueError):
        losses.ma_adv_loss(1.0, AdvLossHistory(3, [0.5]), 4)


def test_total_loss_examples():
    assert losses.generator_total_loss(0.5, 0.6, 0.0) == 0.5
    assert losses.generator_total_loss(0.5, 0.6, 0.1) == pytest.approx(0.56)
    with pytest.raises(ValueError):
        losses.generator_total_loss(0.5, 0.6, -1)


def test_score_targets():
    assert (ScoreTargets().r_max, ScoreTargets().r_min) == (1.0, -1.0)
    with pytest.raises(ValueError):
        ScoreTargets(0.5, 0.5)
    with pytest.raises(ValueError):
        ScoreTargets(2.0, -1.0)


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError, match="shape"):
        losses.pixel_loss_img(np.zeros((1, 3, 2, 2)), np.zeros((1, 3, 2, 3)))
    with pytest.raises(ValueError):
        losses.pixel_loss_spec(np.zeros((2, 2)), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        losses.score_loss(1.0, np.array([]))


def test_every_loss_gradient_passes():
    rows = loss_cases(seed=3)
    assert all(r.passed for r in rows), [(r.name, r.max_error) for r in rows]


@given(arrays(np.float64, (3, 2, 4), elements=unit), arrays(np.float64, (3, 2, 4), elements=unit))
def test_pixel_loss_nonnegative_and_zero_iff_equal(a, b):
    val = losses.pixel_loss_spec(a, b)
    assert val >= 0
    assert (val == 0) == np.array_equal(a, b)


@given(arrays(np.float64, 8, elements=unit), st.permutations(range(8)))
def test_losses_invariant_to_batch_order(r, perm):
    perm = list(perm)
    assert losses.score_loss(1.0, r) == pytest.approx(losses.score_loss(1.0, r[perm]), rel=1e-12)
    y = np.broadcast_to(r[:, None, None, None], (8, 1, 2, 2))
    assert losses.pixel_loss_img(y, 0 * y) == pytest.approx(losses.pixel_loss_img(y[perm], 0 * y), rel=1e-12)
