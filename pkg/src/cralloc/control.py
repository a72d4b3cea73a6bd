"""Feedback load control: a positional PID loop that tightens queue truncation under overload."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import ActionSpaceSpec, ConfigError


@dataclass(frozen=True)
class PidConfig:
    kp: float = 0.5
    ki: float = 0.3
    kd: float = 0.0
    setpoint: float = 1.0
    out_min: float = 0.0
    out_max: float = 1.0
    windup: float = 10.0   # bound on the integral accumulator
    dt: float = 1.0

    def __post_init__(self):
        if not self.out_min <= self.out_max:
            raise ConfigError("output bounds must satisfy out_min <= out_max")
        if not self.dt > 0:
            raise ConfigError("sample period must be positive")
        if self.windup < 0:
            raise ConfigError("anti-windup limit must be non-negative")


@dataclass(frozen=True)
class PidState:
    integral: float = 0.0
    prev_error: float = 0.0
    output: float = 0.0


def pid_step(cfg: PidConfig, state: PidState, measurement: float) -> tuple[float, PidState]:
    """Positional PID on ``measurement - setpoint``; the output is clipped to bounds.

    The integral is clamped to ``+-windup`` and frozen while the output is
    saturated in the direction the error is pushing.
    """
    if not math.isfinite(measurement):
        raise ConfigError(f"non-finite measurement {measurement!r}")
    err = measurement - cfg.setpoint
    integral = min(max(state.integral + err * cfg.dt, -cfg.windup), cfg.windup)
    deriv = (err - state.prev_error) / cfg.dt
    raw = cfg.kp * err + cfg.ki * integral + cfg.kd * deriv
    out = min(max(raw, cfg.out_min), cfg.out_max)
    if (raw > cfg.out_max and err > 0) or (raw < cfg.out_min and err < 0):
        integral = state.integral
    return out, PidState(integral=integral, prev_error=err, output=out)


@dataclass(frozen=True)
class ClampConfig:
    """How a control output in ``[0, out_max]`` maps onto decision limits.

    The queue cap shrinks linearly from the longest truncation length at
    output 0 down to one bucket at ``out_max``; at or above
    ``simple_model_at`` (as a fraction of ``out_max``) the simple model is forced.
    """

    out_max: float = 1.0
    simple_model_at: float = 0.8

    def __post_init__(self):
        if not self.out_max > 0 or not 0 <= self.simple_model_at <= 1:
            raise ConfigError("invalid clamp configuration")


@dataclass(frozen=True)
class Clamp:
    queue_cap: Optional[float]   # items; None means unrestricted
    force_simple: bool
    level: float                 # output as a fraction of its maximum


def apply_clamp(output: float, spec: ActionSpaceSpec = ActionSpaceSpec(), cfg: ClampConfig = ClampConfig()) -> Clamp:
    level = min(max(output / cfg.out_max, 0.0), 1.0)
    if level <= 0.0:
        return Clamp(None, False, 0.0)
    hi, lo = float(spec.max_queue_length), float(spec.queue_bucket_width)
    return Clamp(hi - level * (hi - lo), level >= cfg.simple_model_at, level)


def clamp_decisions(buckets: np.ndarray, models: np.ndarray, clamp: Clamp,
                    spec: ActionSpaceSpec = ActionSpaceSpec()) -> tuple[np.ndarray, np.ndarray]:
    """Apply a clamp to explicit decisions; costs can only go down."""
    buckets = np.asarray(buckets)
    models = np.asarray(models)
    if clamp.queue_cap is not None:
        top = int(math.ceil(clamp.queue_cap / spec.queue_bucket_width)) - 1
        buckets = np.minimum(buckets, max(top, 0))
    if clamp.force_simple:
        models = np.zeros_like(models)
    return buckets, models


@dataclass
class LoadMonitor:
    """Exponential moving average of load (cost over capacity)."""

    smoothing: float = 0.5
    value: Optional[float] = None

    def __post_init__(self):
        if not 0 < self.smoothing <= 1:
            raise ConfigError("smoothing must be in (0, 1]")

    def update(self, cost: float, capacity: float) -> float:
        if not capacity > 0:
            raise ConfigError("capacity must be positive")
        load = cost / capacity
        self.value = load if self.value is None else self.smoothing * load + (1 - self.smoothing) * self.value
        return self.value


@dataclass
class Controller:
    """PID plus load monitor for one phase."""

    pid: PidConfig = PidConfig()
    clamp: ClampConfig = ClampConfig()
    smoothing: float = 0.5

    def __post_init__(self):
        self.state = PidState()
        self.monitor = LoadMonitor(self.smoothing)
        self.history: list[tuple[int, float, float, float]] = []

    def current(self, spec: ActionSpaceSpec) -> Clamp:
        return apply_clamp(self.state.output, spec, self.clamp)

    def observe(self, step: int, cost: float, capacity: float) -> float:
        m = self.monitor.update(cost, capacity)
        out, self.state = pid_step(self.pid, self.state, m)
        self.history.append((step, m, out, min(max(out / self.clamp.out_max, 0.0), 1.0)))
        return out

    def reset(self) -> None:
        self.state = PidState()
        self.monitor = LoadMonitor(self.smoothing)


def write_control_log(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "measurement", "output", "clamp_level"])
        for step, m, out, level in history:
            w.writerow([step, repr(m), repr(out), repr(level)])
