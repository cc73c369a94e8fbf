import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from metapi.process_sim import (
    FOPTD_DT, FoptdSim, FoptdTask, NumericInputError, TwoTankParams, TwoTankState,
    fit_foptd, foptd_step_response, linearize_two_tank, simulate_foptd, tank_flow_step, two_tank_step,
)


def analytic_step(K, tau, theta, t):
    return np.where(t >= theta, K * (1 - np.exp(-(t - theta) / tau)), 0.0)


def test_unit_step_at_one_time_constant():
    y = simulate_foptd(FoptdTask(1.0, 1.0, 0.0), np.ones(20))
    assert abs(y[-1] - 0.6321) < 1e-4
    assert abs(y[-1] - (1 - math.exp(-1))) < 1e-12


def test_half_decay_when_dt_is_tau_ln2():
    sim = FoptdSim(1.0, 1.0, 0.0, dt=math.log(2), y0=1.0, min_resolution=None)
    assert sim.step(0.0)[0] == 0.5


def test_delayed_step_value():
    y = simulate_foptd(FoptdTask(0.5, 1.0, 0.2), np.ones(24))
    assert abs(y[-1] - 0.5 * (1 - math.exp(-1.0))) < 1e-6
    assert abs(y[-1] - 0.3161) < 1e-4


@given(st.floats(0.1, 2.0), st.floats(0.25, 1.0), st.integers(0, 20))
def test_matches_analytic_step_on_grid_delays(K, tau, n_delay):
    theta = n_delay * FOPTD_DT
    n = 100
    y = simulate_foptd(FoptdTask(K, tau, theta), np.ones(n))
    t = FOPTD_DT * np.arange(1, n + 1)
    assert np.max(np.abs(y - analytic_step(K, tau, theta, t))) < 1e-9


def test_fractional_delay_interpolates_between_grid_neighbours():
    n = 60
    lo = simulate_foptd(FoptdTask(1.0, 0.5, 0.10), np.ones(n))
    hi = simulate_foptd(FoptdTask(1.0, 0.5, 0.15), np.ones(n))
    mid = simulate_foptd(FoptdTask(1.0, 0.5, 0.125), np.ones(n))
    assert np.allclose(mid, 0.5 * (lo + hi), atol=1e-12)


@given(st.floats(0.25, 1.0), st.floats(0.25, 1.0), st.floats(0.0, 1.0),
       st.floats(-3, 3), st.floats(-3, 3))
def test_linearity(K, tau, ratio, a, b):
    task = FoptdTask(K, tau, ratio * tau)
    rng = np.random.default_rng(0)
    u1, u2 = rng.normal(size=80), rng.normal(size=80)
    lhs = simulate_foptd(task, a * u1 + b * u2)
    rhs = a * simulate_foptd(task, u1) + b * simulate_foptd(task, u2)
    assert np.allclose(lhs, rhs, atol=1e-9)


@given(st.sampled_from([0.5, 2.0, 4.0]), st.integers(0, 8))
def test_time_scaling(c, n_delay):
    # (K, c tau, c theta) sampled at c dt traces the same samples
    task = FoptdTask(0.7, 0.5, n_delay * FOPTD_DT)
    u = np.random.default_rng(3).normal(size=50)
    y1 = simulate_foptd(task, u)
    y2 = simulate_foptd(task.scaled(c), u, dt=c * FOPTD_DT)
    assert np.allclose(y1, y2, atol=1e-12)


def test_batched_rows_are_independent():
    sim = FoptdSim([0.5, 1.0], [0.5, 1.0], [0.1, 0.3])
    single = FoptdSim(1.0, 1.0, 0.3)
    for k in range(40):
        u = np.array([math.sin(k), math.cos(k)])
        yb = sim.step(u)
        ys = single.step(u[1])
    assert yb[1] == ys[0]


def test_non_finite_input_rejected():
    sim = FoptdSim(1.0, 1.0, 0.0)
    with pytest.raises(NumericInputError):
        sim.step(float("nan"))


def test_coarse_dt_rejected_by_default():
    with pytest.raises(ValueError):
        FoptdSim(1.0, 0.1, 0.0, dt=0.05)


def test_task_validation():
    with pytest.raises(ValueError):
        FoptdTask(1.0, 0.0, 0.1)
    with pytest.raises(ValueError):
        FoptdTask(1.0, 1.0, -0.1)


# -- two-tank ----------------------------------------------------------------------------

def test_equilibrium_is_a_fixed_point():
    prm = TwoTankParams()
    s = TwoTankState.at_level(55.0, prm)
    s2 = two_tank_step(s, s.p)
    for f in ("p", "f_in", "f_out", "level", "m"):
        assert abs(getattr(s2, f) - getattr(s, f)) < 1e-9


def test_closed_flow_loop_holds_equilibrium():
    s = TwoTankState.at_level(55.0)
    s2 = s
    for _ in range(100):
        s2 = tank_flow_step(s2, s.f_in)
    assert abs(s2.level_cm - 55.0) < 1e-6


def test_pump_off_drains_monotonically():
    s = TwoTankState.at_level(55.0)
    levels = []
    for _ in range(2000):
        s = two_tank_step(s, 0.0)
        levels.append(s.level)
    assert np.all(np.diff(levels) <= 1e-12)
    assert levels[-1] < 0.2 * 5.5
    assert min(levels) >= 0.0


def test_linearization_matches_published_fit():
    fit = linearize_two_tank(55.0)
    assert abs(fit.K - 1.7) <= 0.15 * 1.7
    assert abs(fit.tau - 55.0) <= 0.15 * 55.0
    assert abs(fit.theta - 13.0) <= 0.30 * 13.0


@pytest.mark.parametrize("level", [50.0, 52.5, 57.5, 60.0])
def test_operating_region_fit(level):
    fit = linearize_two_tank(level)
    assert abs(fit.K - 1.7) <= 0.15 * 1.7
    assert abs(fit.tau - 55.0) <= 0.15 * 55.0
    assert abs(fit.theta - 13.0) <= 0.30 * 13.0


def test_fitter_recovers_a_linear_foptd():
    true = FoptdTask(1.3, 40.0, 9.0)
    t = np.arange(0, 400, 0.5)
    dy = 2.0 * foptd_step_response(t, true.K, true.tau, true.theta)
    fit = fit_foptd(t, dy, 2.0)
    for a, b in ((fit.K, true.K), (fit.tau, true.tau), (fit.theta, true.theta)):
        assert abs(a - b) <= 0.01 * b


def test_fitted_gain_insensitive_to_step_size():
    k1 = linearize_two_tank(55.0, step_lpm=1.0).K
    k2 = linearize_two_tank(55.0, step_lpm=2.0).K
    assert abs(k2 - k1) / k1 < 0.05
    km = linearize_two_tank(55.0, step_lpm=-2.0).K
    assert abs(km - k1) / k1 < 0.05
