import math

import numpy as np
import pytest

from rewindlab import engine as E
from rewindlab import optim as O


def test_resnet_schedule_points():
    s = O.resnet_schedule()
    assert O.lr_at(s, 0) == 0.1
    assert O.lr_at(s, 35999) == 0.1
    assert O.lr_at(s, 36000) == 0.01
    assert O.lr_at(s, 54000) == 0.001
    assert O.lr_at(s, 71999) == 0.001


def test_wrn_schedule_points():
    s = O.wrn_schedule()
    assert [s.lr_at(t) for t in (0, 32000, 48000, 64000, 79999)] == [0.1, 0.02, 0.004, 0.0008, 0.0008]


@pytest.mark.parametrize("t", [-1, 72000])
def test_lr_out_of_range(t):
    with pytest.raises(ValueError):
        O.resnet_schedule().lr_at(t)


def test_schedule_non_increasing_and_right_continuous():
    for s in (O.resnet_schedule(), O.wrn_schedule()):
        ts = sorted({0, s.total_iterations - 1, *s.boundaries, *(b - 1 for b in s.boundaries)})
        lrs = [s.lr_at(t) for t in ts]
        assert lrs == sorted(lrs, reverse=True)


@pytest.mark.parametrize("kw", [
    dict(boundaries=(5, 3), multipliers=(0.1, 0.1)),
    dict(boundaries=(0,), multipliers=(0.1,)),
    dict(boundaries=(10,), multipliers=(0.1,)),
    dict(boundaries=(3,), multipliers=(0.1, 0.2)),
])
def test_schedule_validation(kw):
    with pytest.raises(ValueError):
        O.LrSchedule(0.1, total_iterations=10, **kw)


def test_loss_examples():
    labels = np.array([1, 2])
    z = np.full((2, 10), -50.0)
    z[0, 1] = z[1, 2] = 50.0
    assert O.loss(E.Tensor(z), labels, [], 0.0).item() == pytest.approx(0.0, abs=1e-12)
    assert O.loss(E.Tensor(np.zeros((2, 10))), labels, [], 0.0).item() == pytest.approx(2.302585, abs=1e-6)
    w = E.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    total = O.loss(E.Tensor(np.zeros((2, 10))), labels, [w], 1e-4).item()
    assert total == pytest.approx(math.log(10) + 5e-4, abs=1e-6)


def _const(lr, n=10):
    return O.LrSchedule.constant(lr, n)


def test_nesterov_hand_computed():
    w = {"w": np.array([1.0])}
    st = O.OptimizerState.zeros_like(w, momentum=0.9)
    O.sgd_step(st, w, {"w": np.array([1.0])}, _const(0.1))
    assert st.velocity["w"][0] == pytest.approx(-0.1)
    assert w["w"][0] == pytest.approx(0.81)


def test_zero_momentum_is_plain_sgd(rng):
    w0 = rng.standard_normal(5)
    g = rng.standard_normal(5)
    w = {"w": w0.copy()}
    O.sgd_step(O.OptimizerState.zeros_like(w, momentum=0.0), w, {"w": g}, _const(0.05))
    np.testing.assert_allclose(w["w"], w0 - 0.05 * g, rtol=1e-15)


def test_two_steps_match_scalar_simulation():
    mu, lr, g = 0.9, 0.1, 0.5
    w = {"w": np.array([2.0])}
    st = O.OptimizerState.zeros_like(w, momentum=mu)
    ww, v = 2.0, 0.0
    for _ in range(2):
        O.sgd_step(st, w, {"w": np.array([g])}, _const(lr))
        v = mu * v - lr * g
        ww = ww + mu * v - lr * g
    assert w["w"][0] == pytest.approx(ww, rel=1e-15)


def test_l2_only_shrinks_magnitude():
    w = {"w": np.array([1.5, -0.7])}
    st = O.OptimizerState.zeros_like(w, momentum=0.9)
    prev = np.abs(w["w"]).copy()
    for _ in range(20):
        wt = E.Tensor(w["w"], requires_grad=True)
        (E.sum_of_squares([wt]) * 1e-2).backward()
        O.sgd_step(st, w, {"w": wt.grad}, _const(0.1, 100))
        assert np.all(np.abs(w["w"]) < prev)
        prev = np.abs(w["w"]).copy()


def test_masked_entries_stay_exact_zero(rng):
    w = {"w": rng.standard_normal(6).astype(np.float32)}
    mask = {"w": np.array([1, 0, 1, 0, 1, 0], bool)}
    w["w"][~mask["w"]] = 0.0
    st = O.OptimizerState.zeros_like(w)
    for _ in range(5):
        O.sgd_step(st, w, {"w": rng.standard_normal(6).astype(np.float32)}, _const(0.1), mask)
    dead = w["w"][~mask["w"]]
    assert np.all(dead == 0.0) and not np.any(np.signbit(dead))
    assert np.all(st.velocity["w"][~mask["w"]] == 0.0)


def test_untouched_velocity_stays_zero():
    w = {"a": np.ones(3), "b": np.ones(2)}
    st = O.OptimizerState.zeros_like(w)
    O.sgd_step(st, w, {"a": np.ones(3), "b": np.zeros(2)}, _const(0.1))
    assert np.all(st.velocity["b"] == 0)


def test_nan_gradient_aborts_with_diagnostics():
    w = {"w": np.ones(3)}
    with pytest.raises(O.TrainingDiverged, match="'w'.*iteration 0"):
        O.sgd_step(O.OptimizerState.zeros_like(w), w, {"w": np.array([1.0, np.nan, 0.0])}, _const(0.1))
    with pytest.raises(O.TrainingDiverged):
        O.check_finite_loss(float("inf"), 7)
