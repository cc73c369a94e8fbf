"""Online gain recommendations from a stream of closed-loop process data.

The tuner reconstructs the actor's observation ``[kp, ki, e, integral(e)]``
purely from ``(t, setpoint, measurement)`` records: it keeps its own copy of
the PI integral (rectangle rule on the timestamp gaps, mirroring the loop's
conditional-integration anti-windup when output limits are given) and emits
new gains at every RL-step boundary.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .agent import Agent, ActorState
from .meta_env import AugmentationSpec, EpisodeConfig

STREAM_COLUMNS = ("t", "setpoint", "measurement")


class StreamWarning(UserWarning):
    pass


@dataclass(frozen=True)
class GainRecord:
    t: float
    kp: float
    ki: float


class OnlineTuner:
    """Feeds records one at a time; :meth:`feed` returns a :class:`GainRecord` at RL boundaries.

    Without an augmentation spec, timestamps are in agent time units and
    errors are used as-is. With one, timestamps are seconds, errors are
    scaled by ``spec.y_scale`` and the RL period is ``spec.sample_period``.
    """

    def __init__(self, agent: Agent, spec: AugmentationSpec | None = None,
                 config: EpisodeConfig | None = None, output_limits: tuple[float, float] | None = None,
                 forget: float = 1.0):
        self.agent = agent
        self.spec = spec
        self.config = config or EpisodeConfig()
        self.output_limits = output_limits
        self.forget = forget
        self.kp, self.ki = self.config.initial_gains
        self.integral = 0.0
        self.state: ActorState = agent.initial_state(1)
        self._period = spec.sample_period if spec is not None else self.config.rl_dt
        self._time_unit = spec.time_unit if spec is not None else 1.0
        self._next_boundary: float | None = None
        self._prev: tuple[float, float] | None = None  # (t, e) of the last accepted record

    def _error(self, sp: float, meas: float) -> float:
        if self.spec is None:
            return sp - meas
        return float(self.spec.scale_y(sp) - self.spec.scale_y(meas))

    def _integrate(self, e: float, dt: float) -> None:
        integral = self.integral + e * dt
        if self.output_limits is None:
            self.integral = integral
            return
        bias = self.spec.u_bias if self.spec is not None else 0.0
        scale = self.spec.u_scale if self.spec is not None else 1.0
        u = bias + scale * (self.kp * e + self.ki * integral)
        lo, hi = self.output_limits
        if lo <= u <= hi:
            self.integral = integral

    def feed(self, t: float, setpoint: float, measurement: float) -> GainRecord | None:
        t, setpoint, measurement = float(t), float(setpoint), float(measurement)
        if not all(math.isfinite(v) for v in (t, setpoint, measurement)):
            warnings.warn(f"non-finite record at t={t!r} rejected", StreamWarning, stacklevel=2)
            return None
        if self._prev is not None and t <= self._prev[0]:
            warnings.warn(f"non-monotone timestamp {t!r} after {self._prev[0]!r} rejected",
                          StreamWarning, stacklevel=2)
            return None
        e = self._error(setpoint, measurement)
        if self._prev is None:
            self._next_boundary = t
        else:
            t_prev, e_prev = self._prev
            self._integrate(e_prev, (t - t_prev) / self._time_unit)
        self._prev = (t, e)
        if t < self._next_boundary - 1e-9 * self._period:
            return None
        obs = np.array([[self.kp, self.ki, e, self.integral]])
        action, self.state = self.agent.deterministic_action(obs, self.state, self.forget)
        cfg = self.config
        self.kp = float(np.clip(self.kp + action[0, 0], cfg.gain_min, cfg.gain_max))
        self.ki = float(np.clip(self.ki + action[0, 1], cfg.gain_min, cfg.gain_max))
        self._next_boundary += self._period
        return GainRecord(t, self.kp, self.ki)


def read_stream(lines: Iterable[str]) -> Iterator[tuple[float, float, float]]:
    """Parse ``t,setpoint,measurement`` CSV lines; a header line is skipped."""
    for n, row in enumerate(csv.reader(lines)):
        if not row or row[0].startswith("#"):
            continue
        if n == 0 and row[0].strip() == "t":
            continue
        if len(row) != 3:
            warnings.warn(f"line {n + 1}: expected 3 fields, got {len(row)}", StreamWarning, stacklevel=2)
            continue
        try:
            yield tuple(float(v) for v in row)
        except ValueError:
            warnings.warn(f"line {n + 1}: unparseable record {row!r}", StreamWarning, stacklevel=2)


def tune_stream(tuner: OnlineTuner, records: Iterable[tuple[float, float, float]]) -> Iterator[GainRecord]:
    for rec in records:
        out = tuner.feed(*rec)
        if out is not None:
            yield out
