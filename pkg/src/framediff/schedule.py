"""Variance-preserving noise schedule and per-frame diffusion clocks.

Time is continuous on [0, T].  ``t = 0`` is reserved as the exact
"clean/frozen" marker used by conditioning tasks; training and sampling
stay above ``t_min`` to avoid the score singularity as the marginal std
vanishes.  Each video frame carries its own time, held in a
:class:`FrameTimes` vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import RngStream


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-rate VP schedule; mean_coef(t)^2 + std(t)^2 == 1 for all t."""

    beta_min: float = 0.1
    beta_max: float = 20.0
    horizon: float = 1.0
    t_min: float = 1e-3

    def __post_init__(self):
        if self.beta_min < 0 or self.beta_max < self.beta_min:
            raise ValueError("need 0 <= beta_min <= beta_max")
        if not 0 < self.t_min < self.horizon:
            raise ValueError("need 0 < t_min < horizon")

    def _check_time(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0) or np.any(t > self.horizon):
            raise ValueError(f"time outside [0, {self.horizon}]")
        return t

    def beta(self, t):
        t = self._check_time(t)
        return self.beta_min + (self.beta_max - self.beta_min) * t / self.horizon

    def accumulated_beta(self, t):
        """B(t) = integral of beta from 0 to t, in closed form."""
        t = self._check_time(t)
        return self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t / self.horizon

    def marginal_coeffs(self, t):
        """(mean_coef, std) of the perturbation kernel x_t | x_0 at time t."""
        acc = self.accumulated_beta(t)
        mean_coef = np.exp(-0.5 * acc)
        std = np.sqrt(-np.expm1(-acc))
        return mean_coef, std


@dataclass(frozen=True)
class FrameTimes:
    """One diffusion time per frame; an entry of exactly 0 marks a frozen frame."""

    times: np.ndarray

    def __post_init__(self):
        times = np.ascontiguousarray(self.times, dtype=np.float64)
        if times.ndim != 1 or times.size < 1:
            raise ValueError("times must be a non-empty 1-D vector")
        if np.any(times < 0) or not np.all(np.isfinite(times)):
            raise ValueError("times must be finite and non-negative")
        object.__setattr__(self, "times", times)

    @classmethod
    def broadcast(cls, t: float, n_frames: int) -> "FrameTimes":
        return cls(np.full(n_frames, float(t)))

    @property
    def n_frames(self) -> int:
        return self.times.size

    def frozen_mask(self) -> np.ndarray:
        return self.times == 0.0

    def is_constant(self) -> bool:
        return bool(np.all(self.times == self.times[0]))


@dataclass(frozen=True)
class TimeSamplingConfig:
    """Training-time policy: probability of per-frame-independent times.

    With probability ``p_per_frame`` each frame gets its own uniform draw;
    otherwise one shared draw is broadcast to all frames.
    """

    p_per_frame: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.p_per_frame <= 1.0:
            raise ValueError("p_per_frame must lie in [0, 1]")


def sample_frame_times(cfg: TimeSamplingConfig, sched: NoiseSchedule,
                       n_frames: int, rng: RngStream) -> FrameTimes:
    """Draw a training FrameTimes vector; entries are never exactly 0."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    branch = rng.uniform((1,))[0]
    if branch < cfg.p_per_frame:
        times = rng.uniform((n_frames,), sched.t_min, sched.horizon)
    else:
        times = np.full(n_frames, rng.uniform((1,), sched.t_min, sched.horizon)[0])
    return FrameTimes(times)


def time_grid(sched: NoiseSchedule, steps: int) -> np.ndarray:
    """Descending sampling times: K points uniform on [t_min, T], then exactly 0."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    span = sched.horizon - sched.t_min
    ks = np.arange(steps, 0, -1, dtype=np.float64)
    grid = np.empty(steps + 1)
    grid[:steps] = sched.t_min + span * ks / steps
    grid[steps] = 0.0
    return grid
