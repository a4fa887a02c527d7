"""Terminal rewards: background preservation, surrogate alignment, and the judge variant."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

MODES = ("masked", "global", "judge")

# judge(x0_edit, task) -> bool; stands in for a yes/no vision-language check
Judge = Callable[[np.ndarray, object], bool]


def threshold_judge(threshold: float = 0.05) -> Judge:
    """Judge that accepts an edit when its in-mask MSE to ``c_edit`` is below ``threshold``."""

    def judge(x0_edit, task) -> bool:
        return bool(_in_mse(np.asarray(x0_edit), task.c_edit, task.mask) < threshold)

    judge.threshold = threshold
    return judge


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 30.0
    beta: float = 30.0
    mode: str = "masked"
    judge_coeff: float = 5.0
    judge: Judge | None = None

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown reward mode {self.mode!r}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if (self.judge is not None) != (self.mode == "judge"):
            raise ValueError("a judge is required in judge mode and only there")

    def scaled(self, c: float) -> "RewardConfig":
        return RewardConfig(self.alpha * c, self.beta * c, self.mode, self.judge_coeff, self.judge)


@dataclass(frozen=True)
class RewardBreakdown:
    r_edit: float
    r_noedit: float
    total: float


def _in_mse(x, target, mask):
    m = mask.astype(bool)
    return float(np.mean((x[..., m] - target[..., m]) ** 2))


def _out_mse(x, src, mask):
    out = ~mask.astype(bool)
    if not out.any():
        return 0.0
    return float(np.mean((x[..., out] - src[..., out]) ** 2))


def background_reward(x0_edit, task) -> float:
    """Negative out-of-mask MSE to the source; 0 when the mask covers everything."""
    x = np.asarray(x0_edit, dtype=np.float64)
    if x.shape != task.i_src.shape:
        raise ValueError("dimension mismatch")
    return -_out_mse(x, task.i_src, task.mask)


def alignment_reward(x0_edit, task) -> float:
    """Bounded stand-in for a text-image similarity: ``1 / (1 + in-mask MSE)``."""
    x = np.asarray(x0_edit, dtype=np.float64)
    if x.shape != task.c_edit.shape:
        raise ValueError("dimension mismatch")
    if task.mask.sum() < 1:
        raise ValueError("empty edit mask")
    return 1.0 / (1.0 + _in_mse(x, task.c_edit, task.mask))


def compose(x0_edit, task, cfg: RewardConfig) -> RewardBreakdown:
    if cfg.mode == "judge":
        return judge_score(x0_edit, task, cfg)
    a = alignment_reward(x0_edit, task)
    if cfg.mode == "global":
        return RewardBreakdown(a, 0.0, cfg.alpha * a)
    if task.is_global:
        raise ValueError("masked reward needs out-of-mask coordinates; use mode='global'")
    b = background_reward(x0_edit, task)
    return RewardBreakdown(a, b, cfg.alpha * a + cfg.beta * b)


def judge_score(x0_edit, task, cfg: RewardConfig) -> RewardBreakdown:
    """Binary edit verdict plus ``max(0, 1 - judge_coeff * out-of-mask MSE)``."""
    if cfg.judge is None:
        raise ValueError("judge mode needs a judge predicate")
    x = np.asarray(x0_edit, dtype=np.float64)
    r_edit = 1.0 if cfg.judge(x, task) else 0.0
    r_noedit = max(0.0, 1.0 - cfg.judge_coeff * _out_mse(x, task.i_src, task.mask))
    return RewardBreakdown(r_edit, r_noedit, r_edit + r_noedit)


def batch_compose(x0: np.ndarray, tb, cfg: RewardConfig, tasks=None):
    """Vectorised ``compose`` over a TaskBatch; returns (total, r_edit, r_noedit) arrays.

    Judge mode falls back to the scalar path and needs the task objects.
    """
    if cfg.mode == "judge":
        if tasks is None:
            raise ValueError("judge mode needs the task objects")
        rb = [judge_score(x, t, cfg) for x, t in zip(x0, tasks)]
        return (np.array([r.total for r in rb]), np.array([r.r_edit for r in rb]),
                np.array([r.r_noedit for r in rb]))
    m = tb.mask
    n_in = m.sum(axis=1)
    in_mse = ((x0 - tb.c_edit) ** 2 * m).sum(axis=1) / n_in
    a = 1.0 / (1.0 + in_mse)
    if cfg.mode == "global":
        return cfg.alpha * a, a, np.zeros_like(a)
    n_out = (1 - m).sum(axis=1)
    if np.any(n_out == 0):
        raise ValueError("masked reward needs out-of-mask coordinates; use mode='global'")
    b = -((x0 - tb.i_src) ** 2 * (1 - m)).sum(axis=1) / n_out
    return cfg.alpha * a + cfg.beta * b, a, b


def region_errors(x0: np.ndarray, tb) -> tuple[np.ndarray, np.ndarray]:
    """Per-episode (in-mask MSE to c_edit, out-of-mask MSE to i_src)."""
    m = tb.mask
    in_mse = ((x0 - tb.c_edit) ** 2 * m).sum(axis=1) / m.sum(axis=1)
    n_out = np.maximum((1 - m).sum(axis=1), 1)
    out_mse = ((x0 - tb.i_src) ** 2 * (1 - m)).sum(axis=1) / n_out
    return in_mse, out_mse
