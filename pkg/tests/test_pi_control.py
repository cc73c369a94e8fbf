import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from metapi.pi_control import INITIAL_GAINS, PiController, PiGains, simc_tune
from metapi.process_sim import FoptdTask


def test_pure_proportional():
    assert PiController(1.0, 0.0).output(0.5, 0.05) == 0.5


def test_pure_integral_of_constant():
    c = PiController(0.0, 1.0)
    dt = 0.05
    for _ in range(40):
        u = c.output(1.0, dt)
    assert abs(u - 2.0) <= dt


def test_initial_gains():
    assert INITIAL_GAINS.kp == pytest.approx(0.05)
    assert INITIAL_GAINS.ki == pytest.approx(0.05)
    c = PiController(INITIAL_GAINS.kp, INITIAL_GAINS.ki)
    # integral is updated before the output is formed
    assert c.output(1.0, 0.05) == pytest.approx(0.05 * 1.0 + 0.05 * 0.05)


@given(st.floats(0.01, 3), st.floats(0.05, 5))
def test_standard_form_round_trip(Kc, tau_i):
    g = PiGains.from_standard(Kc, tau_i)
    Kc2, ti2 = g.to_standard()
    assert math.isclose(Kc, Kc2, rel_tol=1e-12) and math.isclose(tau_i, ti2, rel_tol=1e-12)


def test_saturation_freezes_integral():
    c = PiController(0.0, 1.0, limits=(-1.0, 1.0))
    for _ in range(200):
        u = c.output(1.0, 0.05)
    assert u == 1.0
    assert c.integral <= 1.0 + 1e-12


def test_simc_best_case():
    s = simc_tune(FoptdTask(0.5, 1.0, 0.2), tau_cl=2.0)
    assert s.Kc == pytest.approx(0.909, rel=0.005)
    assert s.tau_i == pytest.approx(1.067, rel=0.005)


def test_simc_worst_case():
    s = simc_tune(FoptdTask(0.25, 0.25, 0.1), tau_cl=0.5)
    assert s.Kc == pytest.approx(1.667, rel=0.005)
    assert s.tau_i == pytest.approx(0.283, rel=0.005)


def test_simc_default_closed_loop_is_twice_tau():
    task = FoptdTask(0.5, 1.0, 0.2)
    assert simc_tune(task) == simc_tune(task, tau_cl=2.0)


@given(st.floats(0.1, 2), st.floats(0.1, 2))
def test_simc_no_dead_time(K, tau):
    s = simc_tune(FoptdTask(K, tau, 0.0), tau_cl=tau)
    assert s.Kc == pytest.approx(1 / K)
    assert s.tau_i == pytest.approx(tau)


def test_simc_errors():
    with pytest.raises(ZeroDivisionError):
        simc_tune(FoptdTask(0.0, 1.0, 0.1))
    with pytest.raises(ValueError):
        simc_tune(FoptdTask(1.0, 1.0, 0.1), tau_cl=0.0)
