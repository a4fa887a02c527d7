"""Noise schedules and deterministic (DDIM-style) forward/inverse dynamics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal rates ``alpha_bar[0..T]`` with ``alpha_bar[0] == 1``."""

    alpha_bar: np.ndarray

    def __post_init__(self) -> None:
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or ab.size < 2:
            raise ValueError("alpha_bar needs at least two entries (T >= 1)")
        if ab[0] != 1.0:
            raise ValueError("alpha_bar[0] must be exactly 1")
        if not np.all(np.diff(ab) < 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if ab[-1] <= 0:
            raise ValueError("alpha_bar[T] must be positive")
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def T(self) -> int:
        return self.alpha_bar.size - 1

    def check_t(self, t, lo: int = 0) -> None:
        t = np.asarray(t)
        if np.any(t < lo) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [{lo}, {self.T}]: {t}")


@dataclass(frozen=True)
class LatentState:
    x: np.ndarray
    t: int

    def __post_init__(self) -> None:
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim != 1 or not np.all(np.isfinite(x)):
            raise ValueError("latent must be a finite 1-D vector")
        if self.t < 0:
            raise ValueError("timestep must be non-negative")
        object.__setattr__(self, "x", x)


def make_linear_schedule(T: int) -> NoiseSchedule:
    """Schedule with ``alpha_bar_t = 1 - t / (T + 1)``; never reaches zero."""
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    t = np.arange(T + 1, dtype=np.float64)
    return NoiseSchedule(1.0 - t / (T + 1))


def _coef(sched: NoiseSchedule, t):
    ab = sched.alpha_bar[np.asarray(t)]
    # broadcast over the trailing latent axis for batched timesteps
    if np.ndim(ab):
        ab = ab[..., None]
    return np.sqrt(ab), np.sqrt(1.0 - ab)


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")


def forward_sample(x0, t, eps, sched: NoiseSchedule) -> np.ndarray:
    """Noise a clean latent: ``sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps``.

    ``t`` may be a scalar or an array matching the leading axes of ``x0``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    _same_shape(x0, eps)
    sched.check_t(t)
    a, s = _coef(sched, t)
    return a * x0 + s * eps


def implied_x0(x_t, t, eps, sched: NoiseSchedule) -> np.ndarray:
    """Clean latent consistent with ``x_t`` under noise ``eps`` (t >= 1)."""
    x_t = np.asarray(x_t, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    _same_shape(x_t, eps)
    sched.check_t(t, lo=1)
    a, s = _coef(sched, t)
    return (x_t - s * eps) / a


def ddim_step(x_hat0, t, eps, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic move from step ``t`` to ``t - 1`` given a clean estimate."""
    x_hat0 = np.asarray(x_hat0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    _same_shape(x_hat0, eps)
    sched.check_t(t, lo=1)
    a, s = _coef(sched, np.asarray(t) - 1)
    return a * x_hat0 + s * eps
