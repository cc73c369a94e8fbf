"""PI controllers in (K_c, tau_I) and (k_p, k_i) form, and SIMC reference tuning."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .process_sim import FoptdTask


@dataclass(frozen=True)
class PiGains:
    kp: float
    ki: float

    @classmethod
    def from_standard(cls, Kc: float, tau_i: float) -> "PiGains":
        return cls(kp=Kc, ki=Kc / tau_i)

    def to_standard(self) -> tuple[float, float]:
        """(K_c, tau_I); tau_I is infinite for a pure P controller."""
        tau_i = self.kp / self.ki if self.ki != 0 else float("inf")
        return self.kp, tau_i


INITIAL_GAINS = PiGains.from_standard(0.05, 1.0)


class PiController:
    """``u = kp e + ki * integral(e)`` with the integral advanced by the rectangle rule.

    Works on scalars or on numpy arrays (one controller per row). Passing
    ``limits`` saturates the output and freezes the integral while saturated.
    """

    def __init__(self, kp, ki, limits: tuple[float, float] | None = None):
        self.kp = kp
        self.ki = ki
        self.limits = limits
        self.integral = np.zeros_like(np.asarray(kp, dtype=float)) if np.ndim(kp) else 0.0

    @property
    def gains(self) -> PiGains:
        return PiGains(self.kp, self.ki)

    def reset(self) -> None:
        self.integral = self.integral * 0.0

    def output(self, e, dt: float):
        integral = self.integral + e * dt
        u = self.kp * e + self.ki * integral
        if self.limits is not None:
            lo, hi = self.limits
            sat = (u < lo) | (u > hi)
            integral = np.where(sat, self.integral, integral) if np.ndim(u) else (self.integral if sat else integral)
            u = np.clip(u, lo, hi)
            if not np.ndim(u):
                u = float(u)
        self.integral = integral
        return u


def pi_output(ctrl: PiController, e, dt: float):
    return ctrl.output(e, dt)


@dataclass(frozen=True)
class SimcTuning:
    Kc: float
    tau_i: float

    @property
    def gains(self) -> PiGains:
        return PiGains.from_standard(self.Kc, self.tau_i)


def simc_tune(task: FoptdTask, tau_cl: float | None = None) -> SimcTuning:
    """Improved SIMC PI rule; ``tau_cl`` defaults to twice the plant lag."""
    if tau_cl is None:
        tau_cl = 2.0 * task.tau
    if not tau_cl > 0:
        raise ValueError("tau_cl must be positive")
    if task.K == 0:
        raise ZeroDivisionError("SIMC needs a non-zero process gain")
    Kc = task.tau / (task.K * (tau_cl + task.theta))
    tau_i = min(task.tau + task.theta / 3.0, 4.0 * (tau_cl + task.theta))
    return SimcTuning(Kc, tau_i)
