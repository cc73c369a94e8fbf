import numpy as np
import pytest

from metapi import experiments as ex
from metapi.meta_env import SCALED_DISTRIBUTION, TRAINING_DISTRIBUTION
from metapi.process_sim import FoptdTask


def test_cells_outside_the_box_are_masked():
    g = ex.heatmap(ex.ZeroActionPolicy(), "ratio=0.5", n=2, dist=SCALED_DISTRIBUTION)
    assert np.isnan(g.values).all()


def test_slices_stay_inside_distribution():
    for name in ex.SLICES:
        _, xs, _, ys, grid = ex.slice_tasks(name, 16)
        assert len(xs) == len(ys) == 16
        tasks = [t for row in grid for t in row if t is not None]
        assert tasks and all(TRAINING_DISTRIBUTION.contains(t, 1e-9) for t in tasks)


def test_slice_axes():
    x, _, y, _, grid = ex.slice_tasks("K=0.5", 4)
    assert (x, y) == ("tau", "theta")
    assert all(t.K == 0.5 for row in grid for t in row if t)
    x, _, y, _, grid = ex.slice_tasks("ratio=0.5", 4)
    assert (x, y) == ("tau", "K")
    assert all(t.ratio == pytest.approx(0.5) for row in grid for t in row)
    with pytest.raises(ValueError):
        ex.slice_tasks("tau=1", 4)


def test_perfect_tracking_gives_zero_grid():
    def perfect(policy, tasks, config):
        n = len(tasks)
        return ex.AsymptoticResult(tasks, np.zeros(n), np.ones(n, bool), np.zeros(n, int), np.zeros((n, 2)))

    g = ex.heatmap(ex.ZeroActionPolicy(), "ratio=0.5", n=5, evaluate=perfect)
    assert np.all(g.values == 0.0)


def test_one_cell_grid_is_asymptotic_mse():
    pol = ex.ZeroActionPolicy()
    g = ex.heatmap(pol, "ratio=0.5", n=1)
    task = FoptdTask(0.25, 0.25, 0.125)
    assert g.values[0, 0] == ex.asymptotic_mse(pol, task).mse[0]


def test_asymptotic_mse_measures_a_rising_step():
    res = ex.asymptotic_mse(ex.ZeroActionPolicy(), FoptdTask(0.5, 1.0, 0.2))
    assert res.converged[0]
    assert res.changes[0] % 2 == 0 and res.changes[0] >= 4
    assert res.mse[0] > 0.05  # initial gains are sluggish


def test_evaluations_are_bit_identical():
    from metapi.agent import Agent

    ag = Agent(hidden=8, seed=5)
    tasks = [FoptdTask(0.5, 0.9, 0.2), FoptdTask(0.3, 0.5, 0.4)]
    a = ex.asymptotic_mse(ag, tasks)
    b = ex.asymptotic_mse(ag, tasks)
    assert np.array_equal(a.mse, b.mse) and np.array_equal(a.gains, b.gains)


def test_zero_action_converges_at_time_zero():
    res = ex.convergence_time(ex.ZeroActionPolicy(), [FoptdTask(0.5, 1.0, 0.2), FoptdTask(1.0, 0.3, 0.1)])
    assert np.all(res.time == 0.0) and res.converged.all()
    with pytest.raises(ValueError):
        ex.convergence_time(ex.ZeroActionPolicy(), FoptdTask(0.5, 1.0, 0.2), n_changes=10)


def test_no_drift_zero_policy_runs_identical():
    sc = ex.drift_scenarios("scaled")["none"]
    res = ex.drift_experiment(ex.ZeroActionPolicy(), sc)
    assert np.array_equal(res.adaptive_gains, res.frozen_gains)
    assert res.adaptive_mse == res.frozen_mse


def test_drift_schedules():
    sc = ex.drift_scenarios("full")
    assert sc["tau_ramp"].dynamics(0.0) == (0.5, 0.4)
    assert sc["tau_ramp"].dynamics(1e6) == (0.5, 1.0)
    ramp = sc["tau_ramp"]
    mid = 0.5 * (ramp.change_start + ramp.change_end)
    assert ramp.dynamics(mid)[1] == pytest.approx(0.7)
    step = sc["gain_step"]
    assert step.dynamics(step.change_start - 1e-6)[0] == 0.5 and step.dynamics(step.change_start)[0] == 1.0
    for s in ex.drift_scenarios("scaled").values():
        for t in (0.0, 1e6):
            K, tau = s.dynamics(t)
            assert SCALED_DISTRIBUTION.contains(FoptdTask(K, tau, s.theta), 1e-9)


# -- PCA -----------------------------------------------------------------------------------

def test_pca_rank_one():
    rng = np.random.default_rng(0)
    d = rng.normal(size=100)
    X = rng.normal(size=(50, 1)) * d + 3.0
    res = ex.pca(X)
    assert res.explained_ratio[0] == pytest.approx(1.0, abs=1e-12)


def test_pca_reconstruction_and_ordering():
    X = np.random.default_rng(1).normal(size=(40, 12)) @ np.diag(np.linspace(3, 0.1, 12))
    res = ex.pca(X)
    assert np.max(np.abs(res.reconstruct(res.projections) - X)) < 1e-8
    assert np.all(np.diff(res.explained_ratio) <= 1e-15)
    assert res.explained_ratio.sum() <= 1 + 1e-12


def test_pca_degenerate_inputs():
    with pytest.raises(ex.DegenerateInputError):
        ex.pca(np.ones((10, 5)))
    with pytest.raises(ex.DegenerateInputError):
        ex.pca(np.random.default_rng(0).normal(size=(2, 5)))


def test_settling_time():
    t = np.arange(0, 100, 1.0)
    y = 1 - np.exp(-t / 10)
    ts = ex.settling_time(t, y, 0.0, 0.0, 1.0, 100.0)
    assert ts == pytest.approx(30.0, abs=1.0)
    assert ex.settling_time(t, np.zeros_like(t), 0.0, 0.0, 1.0, 100.0) == 100.0


# -- with the trained scaled agent -----------------------------------------------------------

@pytest.mark.slow
def test_tank_tuned_settles_much_faster_than_initial_gains(scaled_agent):
    res = ex.two_tank_experiment(scaled_agent)
    assert res.frozen_settling_s > 2 * res.tuned_settling_s


@pytest.mark.slow
def test_tank_noise_run_tracks_within_noise(scaled_agent):
    res = ex.two_tank_experiment(scaled_agent, noise_cm=1.0)
    log = res.tuned.log
    # last minute of each 5-minute setpoint period after the gains have come up
    late = (log[:, 0] % 300 >= 240) & (log[:, 0] >= 600)
    err = np.abs(log[late, 2] - log[late, 1])
    assert err.mean() <= 1.0


@pytest.mark.slow
def test_tank_gains_near_converge_within_six_minutes(scaled_agent):
    res = ex.two_tank_experiment(scaled_agent)
    assert res.gain_settle_s <= 360.0


@pytest.mark.slow
def test_pca_of_trained_hidden_states(scaled_agent):
    res = ex.pca_hidden_states(scaled_agent, SCALED_DISTRIBUTION, ratio=0.2, n=6,
                               probe=FoptdTask(0.5, 0.9, 0.18))
    assert res.projections.shape[0] == 36
    assert np.all(np.diff(res.explained_ratio) <= 1e-12)
    assert res.trajectory.shape == (41, res.components.shape[0])
