"""Meta-RL tuning environment over a distribution of FOPTD tasks.

One environment instance holds a batch of closed loops (one per task) that
advance in lock-step; each RL step applies gain deltas and then simulates
``rl_dt`` time units of PI feedback at the fine step ``dt``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .pi_control import INITIAL_GAINS, PiController
from .process_sim import (
    FOPTD_DT,
    TANK_DT,
    FoptdSim,
    FoptdTask,
    TwoTankParams,
    TwoTankState,
    tank_flow_step,
)

GAIN_MIN = 0.01
GAIN_MAX = 3.0
DELTA_MAX = 0.1
COST_CAP = 1e3

TRAJECTORY_COLUMNS = ("t", "setpoint", "y", "y_desired", "u", "kp", "ki", "cost")


class EpisodeDoneError(RuntimeError):
    """Raised when stepping an environment whose episode has ended."""


@dataclass(frozen=True)
class TaskDistribution:
    """Uniform box over (K, tau, theta/tau)."""
    K: tuple[float, float] = (0.25, 1.0)
    tau: tuple[float, float] = (0.25, 1.0)
    ratio: tuple[float, float] = (0.0, 1.0)

    def contains(self, task: FoptdTask, tol: float = 1e-12) -> bool:
        return (self.K[0] - tol <= task.K <= self.K[1] + tol
                and self.tau[0] - tol <= task.tau <= self.tau[1] + tol
                and self.ratio[0] - tol <= task.ratio <= self.ratio[1] + tol)

    def sample_arrays(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        K = rng.uniform(*self.K, size=n)
        tau = rng.uniform(*self.tau, size=n)
        theta = rng.uniform(*self.ratio, size=n) * tau
        return K, tau, theta

    def sample(self, rng: np.random.Generator, n: int) -> list[FoptdTask]:
        return [FoptdTask(*map(float, p)) for p in zip(*self.sample_arrays(rng, n))]


TRAINING_DISTRIBUTION = TaskDistribution()
SCALED_DISTRIBUTION = TaskDistribution(K=(0.4, 0.6), tau=(0.8, 1.0), ratio=(0.1, 0.3))


def sample_task(rng: np.random.Generator, dist: TaskDistribution = TRAINING_DISTRIBUTION) -> FoptdTask:
    return dist.sample(rng, 1)[0]


@dataclass(frozen=True)
class EpisodeConfig:
    n_steps: int = 40
    rl_dt: float = 2.75
    dt: float = FOPTD_DT
    setpoint_period: float = 11.0
    setpoint_levels: tuple[float, float] = (1.0, -1.0)
    initial_Kc: float = INITIAL_GAINS.kp
    initial_tau_i: float = INITIAL_GAINS.kp / INITIAL_GAINS.ki
    y0_width: float = 0.1
    delta_max: float = DELTA_MAX
    gain_min: float = GAIN_MIN
    gain_max: float = GAIN_MAX
    beta1: float = 0.5
    beta2: float = 0.5

    def __post_init__(self):
        ratio = self.setpoint_period / self.rl_dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("setpoint period must be a whole number of RL steps")
        sub = self.rl_dt / self.dt
        if abs(sub - round(sub)) > 1e-9:
            raise ValueError("rl_dt must be a whole number of sub-steps")

    @property
    def substeps(self) -> int:
        return int(round(self.rl_dt / self.dt))

    @property
    def steps_per_setpoint(self) -> int:
        return int(round(self.setpoint_period / self.rl_dt))

    @property
    def initial_gains(self) -> tuple[float, float]:
        return self.initial_Kc, self.initial_Kc / self.initial_tau_i


def target_trajectory(task: FoptdTask, setpoint: np.ndarray, dt: float = FOPTD_DT,
                      initial: float | None = None) -> np.ndarray:
    """Desired output: setpoint through a lag of ``2 tau`` and a delay of ``theta``.

    ``setpoint[k]`` holds over ``[k dt, (k+1) dt)``; the result is sampled at
    the same instants. ``initial`` is the setpoint in force before the first
    sample (defaults to ``setpoint[0]``).
    """
    setpoint = np.asarray(setpoint, dtype=float)
    init = float(setpoint[0] if initial is None else initial)
    filt = FoptdSim(1.0, 2.0 * task.tau, task.theta, dt=dt, y0=init, u0=init)
    out = np.empty_like(setpoint)
    out[0] = init
    for k in range(len(setpoint) - 1):
        out[k + 1] = filt.step(setpoint[k])[0]
    return out


def step_cost(y, y_desired, action, beta1: float = 0.5, beta2: float = 0.5):
    """Mean squared tracking error over one RL step plus L1 action penalties.

    ``y`` and ``y_desired`` carry the step's sub-samples on their last axis;
    ``action`` is ``[..., (dkp, dki)]``.
    """
    y = np.asarray(y, dtype=float)
    y_desired = np.asarray(y_desired, dtype=float)
    action = np.asarray(action, dtype=float)
    tracking = np.mean((y_desired - y) ** 2, axis=-1)
    return tracking + beta1 * np.abs(action[..., 0]) + beta2 * np.abs(action[..., 1])


def alternating_setpoint(config: EpisodeConfig) -> Callable[[int], float]:
    per = int(round(config.setpoint_period / config.dt))
    levels = config.setpoint_levels

    def sp(k: int) -> float:
        return levels[(k // per) % len(levels)]

    return sp


DynamicsSchedule = Callable[[float], tuple[np.ndarray | float | None, np.ndarray | float | None]]


class FoptdEnv:
    """Batch of PI closed loops on FOPTD tasks, driven by gain deltas.

    Observations are rows of ``[kp, ki, e, integral(e)]``. With
    ``continuous=True`` the episode never ends (evaluation runs); a
    ``dynamics`` schedule mapping time to ``(K, tau)`` allows drifting plants.
    """

    def __init__(self, tasks: Sequence[FoptdTask], config: EpisodeConfig | None = None,
                 rng: np.random.Generator | None = None, y0=None, continuous: bool = False,
                 setpoint: Callable[[int], float] | None = None,
                 dynamics: DynamicsSchedule | None = None, record: bool = False):
        self.config = config or EpisodeConfig()
        self.tasks = list(tasks)
        self.n = len(self.tasks)
        self.continuous = continuous
        self.setpoint = setpoint or alternating_setpoint(self.config)
        self.dynamics = dynamics
        self.record = record
        self.K = np.array([t.K for t in self.tasks])
        self.tau = np.array([t.tau for t in self.tasks])
        self.theta = np.array([t.theta for t in self.tasks])
        if y0 is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            w = self.config.y0_width
            y0 = rng.uniform(-w, w, size=self.n)
        self._y0 = np.broadcast_to(np.asarray(y0, dtype=float), (self.n,)).copy()
        self.reset()

    def reset(self) -> np.ndarray:
        cfg = self.config
        kp0, ki0 = cfg.initial_gains
        self.ctrl = PiController(np.full(self.n, kp0), np.full(self.n, ki0))
        self.plant = FoptdSim(self.K, self.tau, self.theta, dt=cfg.dt, y0=self._y0)
        # the loop rests at y ~ 0 before the first setpoint step
        self.target = FoptdSim(1.0, 2.0 * self.tau, self.theta, dt=cfg.dt, y0=0.0, u0=0.0)
        self.k = 0
        self.step_index = 0
        self.log: list[np.ndarray] = []
        self._log_cost: list[np.ndarray] = []
        return self.observation()

    @property
    def t(self) -> float:
        return self.k * self.config.dt

    @property
    def done(self) -> bool:
        return not self.continuous and self.step_index >= self.config.n_steps

    @property
    def gains(self) -> np.ndarray:
        return np.stack([self.ctrl.kp, self.ctrl.ki], axis=1)

    def set_gains(self, kp, ki) -> None:
        self.ctrl.kp = np.broadcast_to(np.asarray(kp, dtype=float), (self.n,)).copy()
        self.ctrl.ki = np.broadcast_to(np.asarray(ki, dtype=float), (self.n,)).copy()

    def error(self) -> np.ndarray:
        return self.setpoint(self.k) - self.plant.y

    def observation(self) -> np.ndarray:
        return np.stack([self.ctrl.kp, self.ctrl.ki, self.error(), self.ctrl.integral], axis=1)

    def _apply_dynamics(self) -> None:
        K, tau = self.dynamics(self.t)
        self.plant.set_dynamics(K=K, tau=tau)
        if tau is not None:
            self.target.set_dynamics(tau=2.0 * np.broadcast_to(tau, (self.n,)))

    def simulate(self, n_sub: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Run the loop at fixed gains; returns (y, y_desired) of shape (n, n_sub)."""
        n_sub = self.config.substeps if n_sub is None else n_sub
        dt = self.config.dt
        ys = np.empty((self.n, n_sub))
        yds = np.empty((self.n, n_sub))
        for j in range(n_sub):
            if self.dynamics is not None:
                self._apply_dynamics()
            sp = self.setpoint(self.k)
            e = sp - self.plant.y
            u = self.ctrl.output(e, dt)
            u = np.where(np.isfinite(u), u, 0.0)
            if self.record:
                self.log.append(np.stack([np.full(self.n, self.t), np.full(self.n, sp),
                                          self.plant.y.copy(), self.target.y.copy(), u,
                                          self.ctrl.kp.copy(), self.ctrl.ki.copy()], axis=1))
            ys[:, j] = self.plant.step(u)
            yds[:, j] = self.target.step(np.full(self.n, sp))
            self.k += 1
        return ys, yds

    def step(self, action) -> tuple[np.ndarray, np.ndarray, bool]:
        if self.done:
            raise EpisodeDoneError("episode already finished; call reset()")
        cfg = self.config
        action = np.clip(np.asarray(action, dtype=float).reshape(self.n, 2), -cfg.delta_max, cfg.delta_max)
        self.ctrl.kp = np.clip(self.ctrl.kp + action[:, 0], cfg.gain_min, cfg.gain_max)
        self.ctrl.ki = np.clip(self.ctrl.ki + action[:, 1], cfg.gain_min, cfg.gain_max)
        ys, yds = self.simulate()
        self.last_outputs = (ys, yds)
        cost = step_cost(ys, yds, action, cfg.beta1, cfg.beta2)
        cost = np.where(np.isfinite(cost), np.minimum(cost, COST_CAP), COST_CAP)
        if self.record:
            self._log_cost.extend([cost] * (len(self.log) - len(self._log_cost)))
        self.step_index += 1
        return self.observation(), cost, self.done

    def trajectory(self, i: int = 0) -> np.ndarray:
        """Recorded sub-step log of loop ``i`` with :data:`TRAJECTORY_COLUMNS`."""
        costs = self._log_cost + [np.full(self.n, np.nan)] * (len(self.log) - len(self._log_cost))
        rows = [np.append(r[i], c[i]) for r, c in zip(self.log, costs)]
        return np.array(rows).reshape(-1, len(TRAJECTORY_COLUMNS))


def env_step(env: FoptdEnv, action):
    return env.step(action)


def write_trajectory_csv(path, rows: np.ndarray, columns: Sequence[str] = TRAJECTORY_COLUMNS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(float(v)) for v in r])


# -- data augmentation for out-of-distribution plants ---------------------------

@dataclass(frozen=True)
class AugmentationSpec:
    """Maps a physical loop into the agent's training coordinates.

    Observed outputs become ``(y - y_offset) / y_scale``; the PI output in
    scaled units is multiplied by ``u_scale`` and added to ``u_bias``; one
    RL step spans ``sample_period`` seconds, which the agent reads as
    ``rl_dt`` of its own time units.
    """
    y_offset: float
    y_scale: float
    u_scale: float
    sample_period: float
    u_bias: float = 0.0
    rl_dt: float = 2.75

    def __post_init__(self):
        if not (self.y_scale > 0 and self.u_scale > 0 and self.sample_period > 0):
            raise ValueError("scales and sample period must be positive")

    @property
    def time_unit(self) -> float:
        """Physical seconds per agent time unit."""
        return self.sample_period / self.rl_dt

    def scale_y(self, y):
        return (np.asarray(y, dtype=float) - self.y_offset) / self.y_scale

    def apparent_gain(self, true_gain: float) -> float:
        return true_gain / self.y_scale * self.u_scale

    def apparent_tau(self, true_tau_s: float) -> float:
        return true_tau_s / self.sample_period


def make_augmentation(crude_gain: float, crude_tau_seconds: float, y_center: float,
                      y_scale: float, u_bias: float = 0.0, centre_gain: float = 0.5,
                      centre_tau: float = 0.5) -> AugmentationSpec:
    """Scale a crude FOPTD estimate so it sits at (K, tau) = (0.5, 0.5 x sample period)."""
    if not (crude_gain > 0 and crude_tau_seconds > 0):
        raise ValueError("crude model needs a positive gain and time constant")
    return AugmentationSpec(
        y_offset=y_center,
        y_scale=y_scale,
        u_scale=centre_gain / (crude_gain / y_scale),
        sample_period=crude_tau_seconds / centre_tau,
        u_bias=u_bias,
    )


def tank_schedule(levels_cm: Sequence[float] = (55.0, 60.0, 50.0, 55.0), period_s: float = 300.0):
    """Level setpoint (cm) stepping through ``levels_cm`` every ``period_s`` seconds."""
    levels = list(levels_cm)

    def sp(t: float) -> float:
        return levels[int(t // period_s) % len(levels)]

    return sp


class AugmentedTankEnv:
    """Two-tank level loop seen through an :class:`AugmentationSpec`.

    The level PI works on scaled error in agent time units and its output
    (inflow setpoint, L/min) is ``u_bias + u_scale * PI`` saturated to
    ``[0, f_max]`` with conditional-integration anti-windup.
    """

    def __init__(self, spec: AugmentationSpec, config: EpisodeConfig | None = None,
                 params: TwoTankParams | None = None, start_level_cm: float | None = None,
                 setpoint: Callable[[float], float] | None = None, noise_cm: float = 0.0,
                 rng: np.random.Generator | None = None, dt: float = TANK_DT,
                 n_steps: int | None = None, crude_tau_s: float | None = None):
        self.spec = spec
        self.config = config or EpisodeConfig()
        self.params = params or TwoTankParams()
        self.dt = dt
        self.setpoint = setpoint or tank_schedule()
        self.noise_cm = noise_cm
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.n_steps = n_steps
        self.substeps = int(round(spec.sample_period / dt))
        start = spec.y_offset if start_level_cm is None else start_level_cm
        self.state = TwoTankState.at_level(start, self.params)
        kp0, ki0 = self.config.initial_gains
        self.ctrl = PiController(kp0, ki0, limits=None)
        self.t = 0.0
        self.step_index = 0
        # target lag in seconds: twice the crude time constant
        tau_cl = 2.0 * (crude_tau_s if crude_tau_s is not None else spec.sample_period * 0.5)
        self._target_a = math.exp(-dt / tau_cl)
        self._target = float(spec.scale_y(self.setpoint(0.0)))
        self.log: list[tuple] = []
        self._last_meas = self._measure()

    def _measure(self) -> float:
        m = self.state.m_cm
        if self.noise_cm > 0:
            m += self.rng.uniform(-self.noise_cm, self.noise_cm)
        return m

    def observation(self) -> np.ndarray:
        e = float(self.spec.scale_y(self.setpoint(self.t)) - self.spec.scale_y(self._last_meas))
        return np.array([[self.ctrl.kp, self.ctrl.ki, e, self.ctrl.integral]])

    def _level_output(self, e_scaled: float, dt_agent: float) -> float:
        spec = self.spec
        integral = self.ctrl.integral + e_scaled * dt_agent
        u = spec.u_bias + spec.u_scale * (self.ctrl.kp * e_scaled + self.ctrl.ki * integral)
        if 0.0 <= u <= self.params.f_max:
            self.ctrl.integral = integral
        return min(max(u, 0.0), self.params.f_max)

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        if self.n_steps is not None and self.step_index >= self.n_steps:
            raise EpisodeDoneError("episode already finished")
        cfg = self.config
        a = np.clip(np.asarray(action, dtype=float).reshape(2), -cfg.delta_max, cfg.delta_max)
        self.ctrl.kp = float(np.clip(self.ctrl.kp + a[0], cfg.gain_min, cfg.gain_max))
        self.ctrl.ki = float(np.clip(self.ctrl.ki + a[1], cfg.gain_min, cfg.gain_max))
        dt_agent = self.dt / self.spec.time_unit
        sq = 0.0
        for _ in range(self.substeps):
            sp_cm = self.setpoint(self.t)
            meas = self._last_meas
            e = float(self.spec.scale_y(sp_cm) - self.spec.scale_y(meas))
            f_sp = self._level_output(e, dt_agent)
            self.log.append((self.t, sp_cm, self.state.level_cm, meas, f_sp, self.ctrl.kp, self.ctrl.ki))
            self.state = tank_flow_step(self.state, f_sp, self.dt)
            self.t += self.dt
            self._target = self._target_a * self._target + (1 - self._target_a) * float(self.spec.scale_y(sp_cm))
            self._last_meas = self._measure()
            sq += (self._target - float(self.spec.scale_y(self.state.m_cm))) ** 2
        cost = sq / self.substeps + cfg.beta1 * abs(a[0]) + cfg.beta2 * abs(a[1])
        self.step_index += 1
        done = self.n_steps is not None and self.step_index >= self.n_steps
        return self.observation(), cost, done


def augmented_env_step(env: AugmentedTankEnv, action):
    return env.step(action)
