"""Evaluation experiments for a trained tuning agent.

All runs use the deterministic policy (``delta_max * tanh(mean)``) and are
batched over tasks, so a heatmap is a single vectorized closed-loop run.
Every function accepts any *policy* exposing ``initial_state(batch)`` and
``deterministic_action(obs, state, forget)``, which lets baselines such as
:class:`ZeroActionPolicy` share the code paths.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .agent import ActorState
from .meta_env import (
    AugmentationSpec, AugmentedTankEnv, EpisodeConfig, FoptdEnv, TaskDistribution,
    TRAINING_DISTRIBUTION, make_augmentation, tank_schedule,
)
from .pi_control import simc_tune
from .process_sim import FoptdSim, FoptdTask, TwoTankParams, TwoTankState

MAX_SETPOINT_CHANGES = 50
STABLE_PERIODS = 4
STABLE_REL_TOL = 0.01
CONVERGENCE_BAND = 0.10
DRIFT_FORGET = 0.99


class Policy(Protocol):
    def initial_state(self, batch: int): ...
    def deterministic_action(self, obs: np.ndarray, state, forget: float = 1.0): ...


class ZeroActionPolicy:
    """Never moves the gains; the constant-gain baseline."""

    def initial_state(self, batch: int):
        return batch

    def deterministic_action(self, obs, state, forget: float = 1.0):
        return np.zeros((obs.shape[0], 2)), state


class DegenerateInputError(ValueError):
    pass


def _mask_actions(action: np.ndarray, frozen: np.ndarray) -> np.ndarray:
    return np.where(frozen[:, None], 0.0, action)


# -- asymptotic tracking error ------------------------------------------------------

@dataclass
class AsymptoticResult:
    tasks: list[FoptdTask]
    mse: np.ndarray
    converged: np.ndarray
    changes: np.ndarray   # setpoint changes seen before the measurement window
    gains: np.ndarray     # (n, 2) gains held during the window

    def __getitem__(self, i):
        return float(self.mse[i])


def _is_stable(history: list[np.ndarray], window: int = STABLE_PERIODS,
               rel_tol: float = STABLE_REL_TOL) -> np.ndarray:
    """Per loop: both gains moved < ``rel_tol`` of their magnitude over the last ``window`` periods."""
    if len(history) <= window:
        return np.zeros(history[-1].shape[0], dtype=bool)
    now = history[-1]
    recent = np.stack(history[-window - 1:])
    spread = np.max(np.abs(recent - now), axis=0)
    return np.all(spread < rel_tol * np.abs(now), axis=1)


def asymptotic_mse(policy: Policy, tasks: Sequence[FoptdTask] | FoptdTask,
                   config: EpisodeConfig | None = None,
                   max_changes: int = MAX_SETPOINT_CHANGES) -> AsymptoticResult:
    """Tracking MSE on a -1 -> +1 setpoint step once the tuned gains have settled.

    Gains count as settled when, sampled at setpoint changes, they moved by
    less than 1% over the last 4 periods. The next rising step is then run
    with the gains held fixed and ``(y - y_desired)^2`` is averaged over that
    setpoint period. Loops that never settle within ``max_changes`` changes
    are measured anyway and flagged ``converged = False``.
    """
    tasks = [tasks] if isinstance(tasks, FoptdTask) else list(tasks)
    config = config or EpisodeConfig()
    n = len(tasks)
    env = FoptdEnv(tasks, config, y0=0.0, continuous=True)
    levels = config.setpoint_levels
    per = config.steps_per_setpoint
    state = policy.initial_state(n)
    obs = env.observation()
    history = [env.gains.copy()]
    frozen = np.zeros(n, dtype=bool)
    measuring = np.zeros(n, dtype=bool)
    finished = np.zeros(n, dtype=bool)
    converged = np.zeros(n, dtype=bool)
    changes = np.zeros(n, dtype=int)
    held = np.zeros((n, 2))
    sq_sum = np.zeros(n)
    sq_count = np.zeros(n)
    period = 0
    while not finished.all():
        # at the start of setpoint period `period`
        if period > 0:
            finished |= measuring
            measuring[:] = False
            history.append(env.gains.copy())
            rising = levels[(period - 1) % len(levels)] < levels[period % len(levels)]
            stable = _is_stable(history)
            ready = ~frozen & (stable | (period >= max_changes))
            if rising:
                start = ready & ~finished
                converged |= start & stable
                changes[start] = period
                held[start] = env.gains[start]
                frozen |= start
                measuring |= start
        for _ in range(per):
            action, state = policy.deterministic_action(obs, state)
            obs, _, _ = env.step(_mask_actions(action, frozen))
            ys, yds = env.last_outputs
            sq = np.mean((ys - yds) ** 2, axis=1)
            sq_sum += np.where(measuring, sq, 0.0)
            sq_count += measuring
        period += 1
    return AsymptoticResult(tasks, sq_sum / sq_count, converged, changes, held)


# -- heatmaps -----------------------------------------------------------------------

@dataclass
class HeatmapGrid:
    slice_name: str
    x_name: str
    x: np.ndarray
    y_name: str
    y: np.ndarray
    values: np.ndarray          # (len(y), len(x)); NaN where the cell lies outside the distribution
    converged: np.ndarray       # same shape, bool
    metric: str = "asymptotic_mse"

    def rows(self) -> list[list[float]]:
        out = []
        for i, yv in enumerate(self.y):
            for j, xv in enumerate(self.x):
                out.append([xv, yv, self.values[i, j], float(self.converged[i, j])])
        return out


SLICES = ("K=0.5", "ratio=0.5")


def slice_tasks(slice_name: str, n: int = 16,
                dist: TaskDistribution = TRAINING_DISTRIBUTION) -> tuple[str, np.ndarray, str, np.ndarray, list]:
    """Axis specs and the (y, x) list of tasks (None outside ``dist``) for a named slice."""
    (k_lo, k_hi), (t_lo, t_hi), (r_lo, r_hi) = dist.K, dist.tau, dist.ratio
    taus = np.linspace(t_lo, t_hi, n)
    if slice_name.startswith("K="):
        K = float(slice_name[2:])
        thetas = np.linspace(r_lo * t_lo, r_hi * t_hi, n)
        grid = [[_task_or_none(K, tau, th, dist) for tau in taus] for th in thetas]
        return "tau", taus, "theta", thetas, grid
    if slice_name.startswith("ratio="):
        ratio = float(slice_name[6:])
        Ks = np.linspace(k_lo, k_hi, n)
        grid = [[_task_or_none(K, tau, ratio * tau, dist) for tau in taus] for K in Ks]
        return "tau", taus, "K", Ks, grid
    raise ValueError(f"unknown slice {slice_name!r}; expected 'K=<value>' or 'ratio=<value>'")


def _task_or_none(K, tau, theta, dist):
    task = FoptdTask(float(K), float(tau), float(theta))
    return task if dist.contains(task, tol=1e-9) else None


def heatmap(policy: Policy, slice_name: str, n: int = 16, config: EpisodeConfig | None = None,
            dist: TaskDistribution = TRAINING_DISTRIBUTION,
            evaluate: Callable[[Policy, list[FoptdTask], EpisodeConfig | None], AsymptoticResult] | None = None,
            ) -> HeatmapGrid:
    evaluate = evaluate or asymptotic_mse
    x_name, xs, y_name, ys, grid = slice_tasks(slice_name, n, dist)
    cells = [(i, j) for i in range(len(ys)) for j in range(len(xs)) if grid[i][j] is not None]
    values = np.full((len(ys), len(xs)), np.nan)
    conv = np.zeros((len(ys), len(xs)), dtype=bool)
    if cells:
        res = evaluate(policy, [grid[i][j] for i, j in cells], config)
        for k, (i, j) in enumerate(cells):
            values[i, j] = res.mse[k]
            conv[i, j] = res.converged[k]
    return HeatmapGrid(slice_name, x_name, xs, y_name, ys, values, conv)


def held_out_grid(dist: TaskDistribution, n: int = 3, ratio: float | None = None) -> list[FoptdTask]:
    """n x n tasks over K x tau at a fixed dead-time ratio (the box centre by default)."""
    ratio = 0.5 * (dist.ratio[0] + dist.ratio[1]) if ratio is None else ratio
    return [FoptdTask(float(K), float(tau), float(ratio * tau))
            for K in np.linspace(*dist.K, n) for tau in np.linspace(*dist.tau, n)]


# -- convergence time ---------------------------------------------------------------

@dataclass
class ConvergenceResult:
    tasks: list[FoptdTask]
    time: np.ndarray     # NaN if the gains never came to rest
    final_gains: np.ndarray
    converged: np.ndarray
    gain_history: np.ndarray  # (steps + 1, n, 2), first row the initial gains
    t: np.ndarray


def run_gains(policy: Policy, tasks: Sequence[FoptdTask], n_changes: int,
              config: EpisodeConfig | None = None, forget: float = 1.0,
              dynamics=None, freeze_after: float | None = None, record: bool = False):
    """Continuous deterministic run; returns (env, gain history, times)."""
    config = config or EpisodeConfig()
    n = len(tasks)
    env = FoptdEnv(list(tasks), config, y0=0.0, continuous=True, dynamics=dynamics, record=record)
    state = policy.initial_state(n)
    obs = env.observation()
    hist = [env.gains.copy()]
    times = [0.0]
    for _ in range(n_changes * config.steps_per_setpoint):
        action, state = policy.deterministic_action(obs, state, forget)
        if freeze_after is not None and env.t >= freeze_after - 1e-9:
            action = np.zeros_like(action)
        obs, _, _ = env.step(action)
        hist.append(env.gains.copy())
        times.append(env.t)
    return env, np.array(hist), np.array(times)


def convergence_time(policy: Policy, tasks: Sequence[FoptdTask] | FoptdTask, n_changes: int = 30,
                     config: EpisodeConfig | None = None, band: float = CONVERGENCE_BAND) -> ConvergenceResult:
    """Earliest time after which both gains stay within ``band`` of their final values.

    Gains are sampled whenever the agent acts; the reported time is when
    the first in-band gain pair was put in force (0 if the initial gains
    already qualify). ``converged`` is False where the gains were still
    moving over the last 4 setpoint periods.
    """
    tasks = [tasks] if isinstance(tasks, FoptdTask) else list(tasks)
    config = config or EpisodeConfig()
    if n_changes < 30:
        raise ValueError("convergence needs at least 30 setpoint changes")
    _, hist, times = run_gains(policy, tasks, n_changes, config)
    final = hist[-1]
    inside = np.all(np.abs(hist - final) <= band * np.abs(final), axis=2)  # (steps+1, n)
    # index of the first sample from which every later one is inside
    outside_rev = np.flip(~inside, axis=0)
    last_out = len(hist) - 1 - np.argmax(outside_rev, axis=0)
    any_out = (~inside).any(axis=0)
    first_in = np.where(any_out, last_out + 1, 0)
    per = config.steps_per_setpoint
    samples = [hist[len(hist) - 1 - k * per] for k in range(STABLE_PERIODS + 1)][::-1]
    converged = _is_stable(samples)
    return ConvergenceResult(tasks, times[first_in], final, converged, hist, times)


# -- drift adaptation ----------------------------------------------------------------

@dataclass(frozen=True)
class DriftScenario:
    name: str
    K: tuple[float, float]
    tau: tuple[float, float]
    theta: float
    change_start: float   # agent time units
    change_end: float     # == change_start for a step

    def dynamics(self, t: float):
        if t < self.change_start:
            s = 0.0
        elif t >= self.change_end:
            s = 1.0
        else:
            s = (t - self.change_start) / (self.change_end - self.change_start)
        K = self.K[0] + s * (self.K[1] - self.K[0])
        tau = self.tau[0] + s * (self.tau[1] - self.tau[0])
        return K, tau

    @property
    def initial_task(self) -> FoptdTask:
        return FoptdTask(self.K[0], self.tau[0], self.theta)


def drift_scenarios(scale: str = "full", pre_changes: int = 20, ramp_changes: int = 10) -> dict[str, DriftScenario]:
    """Tau ramp and gain step scenarios; ``scaled`` keeps them inside the scaled task box."""
    period = EpisodeConfig().setpoint_period
    t0 = pre_changes * period
    t1 = t0 + ramp_changes * period
    if scale == "full":
        ramp = DriftScenario("tau_ramp", (0.5, 0.5), (0.4, 1.0), 0.2, t0, t1)
        step = DriftScenario("gain_step", (0.5, 1.0), (1.0, 1.0), 0.2, t0, t0)
        none = DriftScenario("none", (0.5, 0.5), (1.0, 1.0), 0.2, t0, t0)
    elif scale == "scaled":
        ramp = DriftScenario("tau_ramp", (0.5, 0.5), (0.8, 1.0), 0.2, t0, t1)
        step = DriftScenario("gain_step", (0.4, 0.6), (1.0, 1.0), 0.2, t0, t0)
        none = DriftScenario("none", (0.5, 0.5), (0.9, 0.9), 0.18, t0, t0)
    else:
        raise ValueError(f"unknown scale {scale!r}")
    return {s.name: s for s in (ramp, step, none)}


@dataclass
class DriftResult:
    scenario: DriftScenario
    adaptive_mse: float
    frozen_mse: float
    t: np.ndarray
    adaptive_gains: np.ndarray
    frozen_gains: np.ndarray
    trajectory_adaptive: np.ndarray
    trajectory_frozen: np.ndarray


def drift_experiment(policy: Policy, scenario: DriftScenario, post_changes: int = 20,
                     config: EpisodeConfig | None = None, forget: float = DRIFT_FORGET) -> DriftResult:
    """Run through the dynamics change twice: adapting, and with gains held at their pre-change values.

    Both runs are scored on the last rising setpoint step of the run.
    """
    config = config or EpisodeConfig()
    period = config.setpoint_period
    pre = int(round(scenario.change_start / period))
    change = int(round((scenario.change_end - scenario.change_start) / period))
    total = pre + change + post_changes
    if total % 2:
        total += 1  # finish on a rising step (-1 -> +1 at even period indices)
    tasks = [scenario.initial_task, scenario.initial_task]

    def dynamics(t):
        K, tau = scenario.dynamics(t)
        return np.array([K, K]), np.array([tau, tau])

    env = FoptdEnv(tasks, config, y0=0.0, continuous=True, dynamics=dynamics, record=True)
    state = policy.initial_state(2)
    obs = env.observation()
    hist = [env.gains.copy()]
    times = [0.0]
    per = config.steps_per_setpoint
    sq = np.zeros(2)
    for p in range(total + 1):
        for _ in range(per):
            action, state = policy.deterministic_action(obs, state, forget)
            action = np.asarray(action, dtype=float).copy()
            if env.t >= scenario.change_start - 1e-9:
                action[1] = 0.0
            if p == total:
                action[:] = 0.0
            obs, _, _ = env.step(action)
            if p == total:
                ys, yds = env.last_outputs
                sq += np.mean((ys - yds) ** 2, axis=1)
            hist.append(env.gains.copy())
            times.append(env.t)
    mse = sq / per
    hist = np.array(hist)
    return DriftResult(scenario, float(mse[0]), float(mse[1]), np.array(times), hist[:, 0], hist[:, 1],
                       env.trajectory(0), env.trajectory(1))


# -- PCA of deep hidden states ----------------------------------------------------

@dataclass
class PcaResult:
    mean: np.ndarray
    components: np.ndarray          # (k, D), rows are unit directions
    explained_variance: np.ndarray  # (k,)
    explained_ratio: np.ndarray     # (k,)
    projections: np.ndarray         # (N, k)
    labels: np.ndarray | None = None
    trajectory: np.ndarray | None = None  # projected h2 path of the probe task
    extras: dict = field(default_factory=dict)

    def project(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X) - self.mean) @ self.components.T

    def reconstruct(self, Z: np.ndarray) -> np.ndarray:
        return np.asarray(Z) @ self.components + self.mean


def pca(X: np.ndarray, n_components: int | None = None) -> PcaResult:
    """Principal components from the eigendecomposition of the sample covariance."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 3:
        raise DegenerateInputError("PCA needs at least 3 samples")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order].T
    total = evals.sum()
    if not total > 0:
        raise DegenerateInputError("all samples are identical; explained variance is undefined")
    # fix the sign so the largest-magnitude loading of each direction is positive
    signs = np.sign(evecs[np.arange(len(evecs)), np.argmax(np.abs(evecs), axis=1)])
    evecs = evecs * signs[:, None]
    k = len(evals) if n_components is None else n_components
    return PcaResult(mean, evecs[:k], evals[:k], evals[:k] / total, Xc @ evecs[:k].T)


def final_hidden_states(agent, tasks: Sequence[FoptdTask], config: EpisodeConfig | None = None,
                        steps: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Deep hidden state after ``steps`` deterministic steps, plus the full (T+1, n, H) path."""
    config = config or EpisodeConfig()
    steps = config.n_steps if steps is None else steps
    env = FoptdEnv(list(tasks), config, y0=0.0, continuous=True)
    state: ActorState = agent.initial_state(len(tasks))
    obs = env.observation()
    path = [state.h2.copy()]
    for _ in range(steps):
        action, state = agent.deterministic_action(obs, state)
        path.append(state.h2.copy())
        obs, _, _ = env.step(action)
    return state.h2, np.array(path)


def pca_hidden_states(agent, dist: TaskDistribution = TRAINING_DISTRIBUTION, ratio: float = 0.8,
                      n: int = 10, probe: FoptdTask = FoptdTask(0.75, 0.25, 0.20),
                      config: EpisodeConfig | None = None) -> PcaResult:
    """PCA of end-of-episode deep hidden states over a K x tau grid at fixed dead-time ratio."""
    tasks = [FoptdTask(float(K), float(tau), float(ratio * tau))
             for K in np.linspace(*dist.K, n) for tau in np.linspace(*dist.tau, n)]
    h2, _ = final_hidden_states(agent, tasks, config)
    res = pca(h2, n_components=min(h2.shape))
    res.labels = np.array([[t.K, t.tau, t.theta] for t in tasks])
    _, path = final_hidden_states(agent, [probe], config)
    res.trajectory = res.project(path[:, 0, :])
    res.extras["probe"] = (probe.K, probe.tau, probe.theta)
    return res


# -- two-tank deployment --------------------------------------------------------------

CRUDE_GAIN = 1.2      # cm per L/min
CRUDE_TAU_S = 30.0
TANK_Y_SCALE = 10.0   # cm mapped to one agent output unit


def tank_augmentation(params: TwoTankParams | None = None, level_cm: float = 55.0,
                      u_bias: float | None = None) -> AugmentationSpec:
    """Augmentation from the crude tank model, biased at the operating point's inflow."""
    params = params or TwoTankParams()
    if u_bias is None:
        u_bias = TwoTankState.at_level(level_cm, params).f_in
    return make_augmentation(CRUDE_GAIN, CRUDE_TAU_S, level_cm, TANK_Y_SCALE, u_bias=u_bias)


@dataclass
class TankRun:
    log: np.ndarray       # columns TANK_COLUMNS
    gains: np.ndarray     # (steps + 1, 2)
    gain_t: np.ndarray    # seconds


TANK_COLUMNS = ("t_s", "setpoint_cm", "level_cm", "measured_cm", "inflow_setpoint_lpm", "kp", "ki")


def run_tank(policy: Policy, spec: AugmentationSpec, n_steps: int = 40, noise_cm: float = 0.0,
             seed: int = 0, freeze: bool = False, params: TwoTankParams | None = None,
             schedule=None) -> TankRun:
    env = AugmentedTankEnv(spec, params=params, setpoint=schedule or tank_schedule(), noise_cm=noise_cm,
                           rng=np.random.default_rng(seed), crude_tau_s=CRUDE_TAU_S)
    state = policy.initial_state(1)
    obs = env.observation()
    gains = [(env.ctrl.kp, env.ctrl.ki)]
    gt = [0.0]
    for _ in range(n_steps):
        action, state = policy.deterministic_action(obs, state)
        if freeze:
            action = np.zeros_like(action)
        obs, _, _ = env.step(action)
        gains.append((env.ctrl.kp, env.ctrl.ki))
        gt.append(env.t)
    return TankRun(np.array(env.log, dtype=float), np.array(gains), np.array(gt))


def settling_time(t: np.ndarray, y: np.ndarray, t_step: float, y_from: float, y_to: float,
                  window: float, band: float = 0.05) -> float:
    """Time after ``t_step`` until ``y`` stays within ``band`` of the step size around ``y_to``.

    Returns ``window`` if it has not settled by the end of the window.
    """
    sel = (t >= t_step) & (t < t_step + window)
    tt, yy = t[sel], y[sel]
    tol = band * abs(y_to - y_from)
    outside = np.abs(yy - y_to) > tol
    if not outside.any():
        return 0.0
    last = np.nonzero(outside)[0][-1]
    if last + 1 >= len(tt):
        return window
    return float(tt[last + 1] - t_step)


def tank_step_test(spec: AugmentationSpec, kp: float, ki: float, level_from: float = 55.0,
                   level_to: float = 60.0, duration_s: float = 3600.0,
                   params: TwoTankParams | None = None) -> TankRun:
    """Fixed-gain setpoint step on the tank, starting at rest at ``level_from``."""
    env = AugmentedTankEnv(spec, params=params, start_level_cm=level_from,
                           setpoint=lambda t: level_to, crude_tau_s=CRUDE_TAU_S)
    env.ctrl.kp, env.ctrl.ki = kp, ki
    for _ in range(int(round(duration_s / spec.sample_period))):
        env.step(np.zeros(2))
    return TankRun(np.array(env.log, dtype=float), np.array([[kp, ki]]), np.array([0.0]))


@dataclass
class TankResult:
    spec: AugmentationSpec
    tuned: TankRun
    frozen: TankRun
    gain_settle_s: float      # after the first setpoint change; inf if never within 10%
    tuned_settling_s: float   # fixed-gain 55 -> 60 cm step with the final tuned gains
    frozen_settling_s: float  # same step with the initial gains


def two_tank_experiment(policy: Policy, noise_cm: float = 0.0, n_steps: int = 40, seed: int = 0,
                        params: TwoTankParams | None = None, period_s: float = 300.0,
                        step_duration_s: float = 3600.0) -> TankResult:
    """Deploy on the two-tank level loop, alongside a run frozen at the initial gains.

    Settling is compared on a noise-free 55 -> 60 cm step, once with the
    final tuned gains and once with the initial gains; time is counted until
    the level stays within 5% of the step size.
    """
    params = params or TwoTankParams()
    spec = tank_augmentation(params)
    schedule = tank_schedule(period_s=period_s)
    tuned = run_tank(policy, spec, n_steps, noise_cm, seed, params=params, schedule=schedule)
    frozen = run_tank(policy, spec, n_steps, noise_cm, seed, freeze=True, params=params, schedule=schedule)
    g = tuned.gains
    inside = np.all(np.abs(g - g[-1]) <= CONVERGENCE_BAND * np.abs(g[-1]), axis=1)
    last_out = np.nonzero(~inside)[0]
    t_in = tuned.gain_t[last_out[-1] + 1] if len(last_out) else 0.0
    gain_settle = max(0.0, t_in - period_s)

    def settle(kp, ki):
        run = tank_step_test(spec, kp, ki, duration_s=step_duration_s, params=params)
        return settling_time(run.log[:, 0], run.log[:, 2], 0.0, 55.0, 60.0, step_duration_s)

    kp0, ki0 = EpisodeConfig().initial_gains
    return TankResult(spec, tuned, frozen, gain_settle, settle(*g[-1]), settle(kp0, ki0))


# -- trajectories ---------------------------------------------------------------------

TRAJECTORY_COMPARISON_COLUMNS = ("t", "setpoint", "y_desired", "y_agent", "y_initial", "y_simc")


def step_comparison(policy: Policy, task: FoptdTask, config: EpisodeConfig | None = None) -> np.ndarray:
    """-1 -> +1 step under the tuned, initial and SIMC gains, against the target.

    Rows follow :data:`TRAJECTORY_COMPARISON_COLUMNS`; time restarts at the step.
    """
    config = config or EpisodeConfig()
    res = asymptotic_mse(policy, [task], config)
    simc = simc_tune(task).gains
    kp0, ki0 = config.initial_gains
    gains = np.array([res.gains[0], [kp0, ki0], [simc.kp, simc.ki]])
    n_sub = config.substeps * config.steps_per_setpoint
    env = FoptdEnv([task] * 3, config, y0=-1.0, continuous=True)
    env.set_gains(gains[:, 0], gains[:, 1])
    # rest at -1: plant input, integral and target all at their steady values
    u_ss = -1.0 / task.K
    ones = np.ones(3)
    env.plant = FoptdSim(task.K * ones, task.tau, task.theta, dt=config.dt, y0=-1.0, u0=u_ss)
    env.target = FoptdSim(ones, 2.0 * task.tau, task.theta, dt=config.dt, y0=-1.0, u0=-1.0)
    env.ctrl.integral = u_ss / gains[:, 1]
    env.setpoint = lambda k: 1.0
    ys, yds = env.simulate(n_sub)
    t = (np.arange(n_sub) + 1) * config.dt
    return np.column_stack([t, np.ones(n_sub), yds[0], ys[0], ys[1], ys[2]])


# -- output -----------------------------------------------------------------------------

def write_csv(path: str | Path, columns: Sequence[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(float(v)) for v in r])
    return path


def write_heatmap(root: str | Path, grid: HeatmapGrid, experiment: str = "heatmap") -> Path:
    return write_csv(Path(root) / experiment / grid.slice_name / f"{grid.metric}.csv",
                     (grid.x_name, grid.y_name, grid.metric, "converged"), grid.rows())


# -- ablations ----------------------------------------------------------------------------

ABLATIONS = ("privileged_critic", "regularization")


def late_gain_motion(policy: Policy, tasks: Sequence[FoptdTask], config: EpisodeConfig | None = None,
                     fraction: float = 0.25) -> float:
    """Mean per-step ``|dkp| + |dki|`` over the last ``fraction`` of a deterministic episode."""
    config = config or EpisodeConfig()
    _, hist, _ = run_gains(policy, tasks, config.n_steps // config.steps_per_setpoint, config)
    moves = np.abs(np.diff(hist, axis=0)).sum(axis=2)  # (steps, n)
    k = max(1, int(round(fraction * len(moves))))
    return float(moves[-k:].mean())


@dataclass
class AblationResult:
    which: str
    arm_a: object   # TrainResult with the feature on
    arm_b: object   # TrainResult with the feature off
    final_cost_a: float
    final_cost_b: float
    worst_mse_a: float
    worst_mse_b: float
    gain_motion_a: float
    gain_motion_b: float


def ablation(config, which: str, tasks: Sequence[FoptdTask] | None = None, out_dir=None,
             arms: tuple | None = None) -> AblationResult:
    """Paired training runs (same seed and budget) with one feature switched off.

    ``privileged_critic`` drops (K, tau, theta) from the critic input;
    ``regularization`` sets both action-cost weights to zero. Pass already
    trained ``arms`` to skip training.
    """
    from dataclasses import replace
    from .ppo import final_training_cost, train

    if which not in ABLATIONS:
        raise ValueError(f"unknown ablation {which!r}; choose from {ABLATIONS}")
    off = replace(config, privileged=False) if which == "privileged_critic" else replace(config, beta1=0.0, beta2=0.0)
    if arms is None:
        root = Path(out_dir) if out_dir is not None else None
        arms = (train(config, root / "on" if root else None), train(off, root / "off" if root else None))
    a, b = arms
    tasks = list(tasks) if tasks is not None else held_out_grid(config.distribution, 3)
    ep_a, ep_b = config.episode, off.episode
    mse_a = asymptotic_mse(a.agent, tasks, ep_a).mse
    mse_b = asymptotic_mse(b.agent, tasks, ep_b).mse
    return AblationResult(which, a, b, final_training_cost(a.log), final_training_cost(b.log),
                          float(mse_a.max()), float(mse_b.max()),
                          late_gain_motion(a.agent, tasks, ep_a), late_gain_motion(b.agent, tasks, ep_b))
