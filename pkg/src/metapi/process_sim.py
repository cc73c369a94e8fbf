"""Process simulators: FOPTD plants with dead time and the nonlinear two-tank rig.

FOPTD plants are simulated in batches (one row per task) with an exact
zero-order-hold update, so a whole epoch of training episodes advances in a
single numpy call per sub-step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import fsolve, least_squares

FOPTD_DT = 0.05
TANK_DT = 0.5

# fraction of a sub-step below which a dead time counts as an exact multiple
_GRID_TOL = 1e-9


class NumericInputError(ValueError):
    """Raised when a simulator is fed a NaN or infinite input."""


class FitError(RuntimeError):
    """Raised when a FOPTD fit cannot be carried out at the requested point."""


@dataclass(frozen=True)
class FoptdTask:
    K: float
    tau: float
    theta: float

    def __post_init__(self):
        if not (self.tau > 0):
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not (self.theta >= 0):
            raise ValueError(f"theta must be non-negative, got {self.theta}")

    @property
    def ratio(self) -> float:
        return self.theta / self.tau

    def scaled(self, c: float) -> "FoptdTask":
        """Same plant on a time axis stretched by ``c``."""
        return FoptdTask(self.K, c * self.tau, c * self.theta)


def _split_delay(theta: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    steps = theta / dt
    whole = np.floor(steps + _GRID_TOL)
    frac = steps - whole
    frac = np.where(frac < _GRID_TOL, 0.0, frac)
    return whole.astype(np.int64), frac


class FoptdSim:
    """Batch of FOPTD plants ``K e^{-theta s} / (tau s + 1)``.

    Each step holds the input constant for ``dt`` and advances the output by
    ``y <- a y + K (1 - a) u(t - theta)`` with ``a = exp(-dt / tau)``. Dead
    times that are not a multiple of ``dt`` read the delay line by linear
    interpolation between its two nearest entries.
    """

    def __init__(self, K, tau, theta, dt: float = FOPTD_DT, y0=0.0, u0=0.0,
                 min_resolution: float | None = 5.0):
        K = np.atleast_1d(np.asarray(K, dtype=float))
        tau = np.atleast_1d(np.asarray(tau, dtype=float))
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        K, tau, theta = np.broadcast_arrays(K, tau, theta)
        if dt <= 0:
            raise ValueError("dt must be positive")
        if np.any(tau <= 0) or np.any(theta < 0):
            raise ValueError("need tau > 0 and theta >= 0")
        # the update is exact for any dt; the check only guards against coarse sampling
        if min_resolution is not None and np.any(dt > tau / min_resolution + 1e-12):
            raise ValueError(f"dt={dt} does not resolve tau={tau.min():g} (need dt <= tau/{min_resolution:g})")
        self.min_resolution = min_resolution
        self.dt = float(dt)
        self.n = K.size
        self.K = K.astype(float).copy()
        self.tau = tau.astype(float).copy()
        self.theta = theta.astype(float).copy()
        self.a = np.exp(-self.dt / self.tau)
        self._whole, self._frac = _split_delay(self.theta, self.dt)
        # ceil(theta/dt) + 1 slots cover both interpolation taps
        self.delay_len = int(self._whole.max() + (self._frac > 0).any()) + 1
        self.delay_line = np.empty((self.n, self.delay_len))
        self.delay_line[:] = np.broadcast_to(np.asarray(u0, dtype=float), (self.n,))[:, None]
        self._head = 0
        self._rows = np.arange(self.n)
        self.y = np.broadcast_to(np.asarray(y0, dtype=float), (self.n,)).astype(float).copy()

    def set_dynamics(self, K=None, tau=None) -> None:
        """Change gain and/or time constant in place (dead time stays fixed)."""
        if K is not None:
            self.K = np.broadcast_to(np.asarray(K, dtype=float), (self.n,)).copy()
        if tau is not None:
            tau = np.broadcast_to(np.asarray(tau, dtype=float), (self.n,)).copy()
            if self.min_resolution is not None and np.any(self.dt > tau / self.min_resolution + 1e-12):
                raise ValueError("dt does not resolve the new time constant")
            self.tau = tau
            self.a = np.exp(-self.dt / self.tau)

    def delayed_input(self) -> np.ndarray:
        """Input from ``theta`` ago; valid once the current input is written."""
        L = self.delay_len
        near = self.delay_line[self._rows, (self._head - self._whole) % L]
        far = self.delay_line[self._rows, (self._head - self._whole - 1) % L]
        return (1.0 - self._frac) * near + self._frac * far

    def step(self, u) -> np.ndarray:
        u = np.broadcast_to(np.asarray(u, dtype=float), (self.n,))
        if not np.all(np.isfinite(u)):
            raise NumericInputError("non-finite control input")
        self.delay_line[:, self._head] = u
        ud = self.delayed_input()
        self.y = self.a * self.y + self.K * (1.0 - self.a) * ud
        self._head = (self._head + 1) % self.delay_len
        return self.y


def foptd_step(sim: FoptdSim, u) -> np.ndarray:
    return sim.step(u)


def simulate_foptd(task: FoptdTask, u: np.ndarray, dt: float = FOPTD_DT,
                   y0: float = 0.0, u0: float = 0.0) -> np.ndarray:
    """Open-loop response to the input sequence ``u``; returns y after each step."""
    sim = FoptdSim(task.K, task.tau, task.theta, dt=dt, y0=y0, u0=u0)
    out = np.empty(len(u))
    for k, uk in enumerate(u):
        out[k] = sim.step(uk)[0]
    return out


# -- two-tank rig -------------------------------------------------------------

@dataclass(frozen=True)
class TwoTankParams:
    """Constants of the two-tank rig in dm, litres, L/min and seconds.

    ``g`` and ``area_scale`` (a multiplier on the tank cross-section) are
    effective values from :func:`calibrate_tank`: with them the level
    response to the inflow setpoint fits 1.7 cm per L/min with a 55 s lag
    around the 55 cm operating point.
    """
    r_tank: float = 1.2065
    r_pipe: float = 0.125
    f_max: float = 80.0
    f_c: float = 0.61
    tau_p: float = 6.0
    tau_in: float = 6.0
    tau_out: float = 6.0
    tau_m: float = 12.0
    g: float = 120.046004
    area_scale: float = 1.2586998
    height: float = 12.192
    # fixed flow loop (pump-speed PI), % per L/min and seconds
    flow_kc: float = 2.0
    flow_tau_i: float = 6.0

    @property
    def area(self) -> float:
        return self.area_scale * math.pi * self.r_tank ** 2

    @property
    def outflow_coeff(self) -> float:
        """``c`` in ``f_out = c sqrt(level)`` with f_out in L/min."""
        return 60.0 * math.pi * self.r_pipe ** 2 * self.f_c * math.sqrt(2.0 * self.g)


@dataclass
class TwoTankState:
    p: float
    f_in: float
    f_out: float
    level: float  # dm
    m: float      # filtered level, dm
    params: TwoTankParams = field(default_factory=TwoTankParams)
    flow_integral: float = 0.0

    @classmethod
    def at_level(cls, level_cm: float, params: TwoTankParams | None = None) -> "TwoTankState":
        """Equilibrium state holding ``level_cm`` with the flow loop settled."""
        params = params or TwoTankParams()
        level = level_cm / 10.0
        f = params.outflow_coeff * math.sqrt(level)
        p = 100.0 * f / params.f_max
        # zero flow error at equilibrium, so the PI output is its integral term
        return cls(p=p, f_in=f, f_out=f, level=level, m=level, params=params,
                   flow_integral=p * params.flow_tau_i / params.flow_kc)

    @property
    def level_cm(self) -> float:
        return 10.0 * self.level

    @property
    def m_cm(self) -> float:
        return 10.0 * self.m


def _tank_rhs(x: np.ndarray, p_bar: float, prm: TwoTankParams) -> np.ndarray:
    p, f_in, f_out, level, m = x
    dp = (p_bar - p) / prm.tau_p
    dfin = (prm.f_max * p / 100.0 - f_in) / prm.tau_in
    dfout = (prm.outflow_coeff * math.sqrt(max(level, 0.0)) - f_out) / prm.tau_out
    dlevel = (f_in - f_out) / 60.0 / prm.area
    dm = (level - m) / prm.tau_m
    return np.array([dp, dfin, dfout, dlevel, dm])


def two_tank_step(state: TwoTankState, pump_setpoint: float, dt: float = TANK_DT) -> TwoTankState:
    """Advance the five tank ODEs one RK4 step with the pump setpoint held."""
    prm = state.params
    if dt > min(prm.tau_p, prm.tau_in, prm.tau_out, prm.tau_m) / 5:
        raise ValueError("integration step too coarse for the tank filters")
    p_bar = min(max(float(pump_setpoint), 0.0), 100.0)
    x = np.array([state.p, state.f_in, state.f_out, state.level, state.m])
    k1 = _tank_rhs(x, p_bar, prm)
    k2 = _tank_rhs(x + 0.5 * dt * k1, p_bar, prm)
    k3 = _tank_rhs(x + 0.5 * dt * k2, p_bar, prm)
    k4 = _tank_rhs(x + dt * k3, p_bar, prm)
    p, f_in, f_out, level, m = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return replace(
        state,
        p=min(max(p, 0.0), 100.0),
        f_in=max(f_in, 0.0),
        f_out=max(f_out, 0.0),
        level=min(max(level, 0.0), prm.height),
        m=max(m, 0.0),
    )


def flow_controller(state: TwoTankState, flow_setpoint: float, dt: float = TANK_DT) -> tuple[float, TwoTankState]:
    """Fixed pump-speed PI tracking an inflow setpoint (L/min).

    Conditional integration keeps the integral from winding up while the
    pump sits at 0 or 100 %.
    """
    prm = state.params
    e = flow_setpoint - state.f_in
    integral = state.flow_integral + e * dt
    p_bar = prm.flow_kc * (e + integral / prm.flow_tau_i)
    if p_bar > 100.0 or p_bar < 0.0:
        integral = state.flow_integral
        p_bar = min(max(prm.flow_kc * (e + integral / prm.flow_tau_i), 0.0), 100.0)
    return p_bar, replace(state, flow_integral=integral)


def tank_flow_step(state: TwoTankState, flow_setpoint: float, dt: float = TANK_DT) -> TwoTankState:
    """One sample of the rig driven by an inflow setpoint through the flow loop."""
    p_bar, state = flow_controller(state, flow_setpoint, dt)
    return two_tank_step(state, p_bar, dt)


# -- FOPTD identification ------------------------------------------------------

def foptd_step_response(t: np.ndarray, K: float, tau: float, theta: float) -> np.ndarray:
    s = np.clip(t - theta, 0.0, None)
    return K * (1.0 - np.exp(-s / tau))


def fit_foptd(t: np.ndarray, dy: np.ndarray, du: float) -> FoptdTask:
    """Least-squares FOPTD fit of a step response ``dy`` to an input step ``du``.

    ``t`` starts at the step instant and ``dy`` is measured from the
    pre-step steady state.
    """
    t = np.asarray(t, dtype=float)
    dy = np.asarray(dy, dtype=float) / du
    K0 = dy[-1]
    if not np.isfinite(K0) or abs(K0) < 1e-12:
        raise FitError("step response too small to fit")
    crossed = np.nonzero(np.abs(dy) >= 0.632 * abs(K0))[0]
    t63 = t[crossed[0]] if crossed.size else t[-1] / 2
    x0 = np.array([K0, max(0.8 * t63, 1e-6), max(0.2 * t63, 0.0)])

    def resid(x):
        return foptd_step_response(t, x[0], x[1], x[2]) - dy

    fit = least_squares(resid, x0, bounds=([-np.inf, 1e-9, 0.0], [np.inf, np.inf, t[-1]]),
                        x_scale=np.abs(x0) + 1e-3, xtol=1e-12, ftol=1e-12, gtol=1e-12)
    K, tau, theta = fit.x
    return FoptdTask(float(K), float(tau), float(theta))


def linearize_two_tank(operating_level_cm: float, step_lpm: float = 1.0,
                       params: TwoTankParams | None = None, horizon_s: float = 600.0,
                       dt: float = TANK_DT) -> FoptdTask:
    """FOPTD fit (cm per L/min, seconds) of the level response to a flow-setpoint step.

    The rig is held at equilibrium at ``operating_level_cm``, the inflow
    setpoint is stepped by ``step_lpm`` and the measured level is fitted.
    """
    params = params or TwoTankParams()
    height_cm = 10.0 * params.height
    if not (0.0 < operating_level_cm < height_cm):
        raise FitError(f"operating level {operating_level_cm} cm is outside (0, {height_cm}) cm")
    state = TwoTankState.at_level(operating_level_cm, params)
    f0 = state.f_in
    if not (0.0 < f0 + step_lpm <= params.f_max):
        raise FitError("step drives the inflow outside the pump range")
    n = int(round(horizon_s / dt))
    m = np.empty(n)
    for k in range(n):
        state = tank_flow_step(state, f0 + step_lpm, dt)
        m[k] = state.m_cm
        if state.level <= 0.0 or state.level >= params.height:
            raise FitError("level hit a bound during the identification step")
    t = dt * np.arange(1, n + 1)
    return fit_foptd(np.concatenate([[0.0], t]), np.concatenate([[0.0], m - operating_level_cm]), step_lpm)


def calibrate_tank(target_gain: float = 1.7, target_tau_s: float = 55.0, level_cm: float = 55.0,
                   params: TwoTankParams | None = None) -> tuple[float, float]:
    """Effective ``(g, area_scale)`` matching a target FOPTD gain and lag at ``level_cm``."""
    params = params or TwoTankParams()

    def gap(x):
        fit = linearize_two_tank(level_cm, params=replace(params, g=x[0], area_scale=x[1]))
        return [fit.K - target_gain, fit.tau - target_tau_s]

    g, area_scale = fsolve(gap, [params.g, params.area_scale], xtol=1e-12)
    return float(g), float(area_scale)
