"""Synthetic editing MDP: task generation, exact inversion, and one-step denoising.

A task stands in for an (image, source prompt, edit prompt, mask) tuple.
Prompts are identified with pull targets: the source prompt pulls the clean
estimate towards ``i_src``; the edit prompt pulls in-mask coordinates towards
``c_edit`` and, attenuated by ``leak_rho``, out-of-mask coordinates towards a
``drift`` field. That leak is what makes long edits damage the background.

Everything here works on single tasks (the documented API) and on stacked
batches (``TaskBatch``) which the trainer and the search baselines use.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Iterable, Sequence

import numpy as np

from .diffusion import LatentState, NoiseSchedule, ddim_step, forward_sample, implied_x0
from .space import EDIT, GATE, PROMPT, SCALAR, HyperSpace, StepAction

_VECTOR_FIELDS = ("i_src", "c_edit", "drift", "mask", "eps_star")


class ProviderExhausted(RuntimeError):
    """An action provider ran dry before the episode reached t = 0."""


@dataclass(frozen=True)
class EditTask:
    i_src: np.ndarray
    c_edit: np.ndarray
    drift: np.ndarray
    mask: np.ndarray
    leak_rho: float
    pull_kappa: float
    gate_damp: float
    gate_suppress: float
    eps_star: np.ndarray
    seed: int

    def __post_init__(self) -> None:
        for name in _VECTOR_FIELDS:
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        D = self.i_src.shape
        if len(D) != 1:
            raise ValueError("task vectors must be 1-D")
        for name in _VECTOR_FIELDS:
            v = getattr(self, name)
            if v.shape != D:
                raise ValueError(f"{name} has shape {v.shape}, expected {D}")
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} has non-finite entries")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValueError("mask must be binary")
        if self.mask.sum() < 1:
            raise ValueError("mask must contain at least one edit coordinate")
        if not 0.0 <= self.leak_rho <= 1.0:
            raise ValueError("leak_rho must lie in [0, 1]")
        if not 0.0 <= self.pull_kappa < 1.0:
            raise ValueError("pull_kappa must lie in [0, 1)")
        if not 0.0 < self.gate_damp <= 1.0 or not 0.0 <= self.gate_suppress <= 1.0:
            raise ValueError("gate_damp must lie in (0, 1] and gate_suppress in [0, 1]")

    @property
    def D(self) -> int:
        return self.i_src.size

    @property
    def is_global(self) -> bool:
        return bool(np.all(self.mask == 1))

    def edit_condition(self) -> np.ndarray:
        """Where an ungated edit step pulls each coordinate, leak included."""
        m = self.mask
        return m * self.c_edit + (1 - m) * (self.i_src + self.leak_rho * (self.drift - self.i_src))

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            d[f.name] = v.tolist() if isinstance(v, np.ndarray) else v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EditTask":
        return cls(**{f.name: d[f.name] for f in fields(cls)})


@dataclass(frozen=True)
class GenConfig:
    D: int = 16
    mask_fraction: tuple = (0.25, 0.5)
    edit_scale: float = 1.0
    drift_scale: float = 2.0
    leak_range: tuple = (0.2, 0.6)
    kappa_range: tuple = (0.1, 0.2)
    gate_damp: float = 0.7
    gate_suppress: float = 0.0
    global_edit: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "mask_fraction", tuple(self.mask_fraction))
        object.__setattr__(self, "leak_range", tuple(self.leak_range))
        object.__setattr__(self, "kappa_range", tuple(self.kappa_range))
        lo, hi = self.mask_fraction
        if self.D < 2:
            raise ValueError("D must be >= 2")
        if not 0.0 < lo <= hi < 1.0:
            raise ValueError("mask_fraction range must lie inside (0, 1)")
        if not 0.0 <= self.leak_range[0] <= self.leak_range[1] <= 1.0:
            raise ValueError("leak_range must lie inside [0, 1]")
        if not 0.0 < self.kappa_range[0] <= self.kappa_range[1] < 1.0:
            raise ValueError("kappa_range must lie inside (0, 1)")
        if self.edit_scale < 0 or self.drift_scale < 0:
            raise ValueError("offset scales must be non-negative")
        if not 0.0 < self.gate_damp <= 1.0 or not 0.0 <= self.gate_suppress <= 1.0:
            raise ValueError("gate_damp must lie in (0, 1] and gate_suppress in [0, 1]")

    @property
    def mean_mask_fraction(self) -> float:
        return 0.5 * (self.mask_fraction[0] + self.mask_fraction[1])


def generate_task(cfg: GenConfig, seed: int) -> EditTask:
    """Deterministic synthetic task for ``seed``."""
    rng = np.random.default_rng(int(seed))
    D = cfg.D
    i_src = rng.standard_normal(D)
    c_edit = i_src + cfg.edit_scale * rng.standard_normal(D)
    drift = i_src + cfg.drift_scale * rng.standard_normal(D)
    frac = rng.uniform(*cfg.mask_fraction)
    n_in = int(np.clip(np.rint(frac * D), 1, D - 1))
    mask = np.zeros(D)
    mask[rng.permutation(D)[:n_in]] = 1.0
    if cfg.global_edit:
        mask[:] = 1.0
    leak = float(rng.uniform(*cfg.leak_range))
    kappa = float(rng.uniform(*cfg.kappa_range))
    eps = rng.standard_normal(D)
    return EditTask(i_src, c_edit, drift, mask, leak, kappa, cfg.gate_damp, cfg.gate_suppress, eps, int(seed))


def invert(task: EditTask, sched: NoiseSchedule) -> LatentState:
    """Closed-form inversion: the x_T whose implied clean latent under eps_star is i_src."""
    return LatentState(forward_sample(task.i_src, sched.T, task.eps_star, sched), sched.T)


class NfeCounter:
    """Counts one-step denoiser evaluations for a single episode."""

    def __init__(self) -> None:
        self.count = 0

    def tick(self, n: int = 1) -> None:
        self.count += n


def _action_parts(space: HyperSpace, idx: np.ndarray):
    """Split (..., K) index arrays into (is_edit, gate_on, scale) arrays."""
    ip, ig, isc = space.head_index(PROMPT), space.head_index(GATE), space.head_index(SCALAR)
    shape = idx.shape[:-1]
    is_edit = idx[..., ip] == EDIT if ip is not None else np.ones(shape, bool)
    gate = idx[..., ig] == 1 if ig is not None else np.zeros(shape, bool)
    w = space.scale_values()[idx[..., isc]] if isc is not None else np.ones(shape)
    return is_edit, gate, w


def edit_pull_target(task: EditTask, action: StepAction, space: HyperSpace):
    """Pull target and per-coordinate weights for one step's action."""
    idx = space.validate_indices(action.indices)
    is_edit, gate, _ = _action_parts(space, idx)
    if not is_edit:
        return task.i_src.copy(), np.ones(task.D)
    m = task.mask
    target = m * task.c_edit + (1 - m) * task.drift
    weight = m + (1 - m) * task.leak_rho
    if gate:
        weight = weight * (m * task.gate_damp + (1 - m) * task.gate_suppress)
    return target, weight


def denoise_step(
    state: LatentState,
    task: EditTask,
    action: StepAction,
    sched: NoiseSchedule,
    space: HyperSpace,
    counter: NfeCounter | None = None,
) -> LatentState:
    """One application of the denoiser g(x_t, t, H_t) -> x_{t-1}."""
    if state.t < 1:
        raise ValueError("cannot denoise past t = 0")
    target, weight = edit_pull_target(task, action, space)
    _, _, w = _action_parts(space, np.asarray(action.indices))
    x0 = implied_x0(state.x, state.t, task.eps_star, sched)
    x0_hat = x0 + task.pull_kappa * float(w) * weight * (target - x0)
    if counter is not None:
        counter.tick()
    return LatentState(ddim_step(x0_hat, state.t, task.eps_star, sched), state.t - 1)


@dataclass
class EpisodeRecord:
    states: list
    actions: list
    final_x0: np.ndarray
    nfe_count: int


def rollout(
    task: EditTask,
    sched: NoiseSchedule,
    space: HyperSpace,
    action_provider: Iterable[StepAction] | Callable[[LatentState], StepAction],
) -> EpisodeRecord:
    """Invert, then denoise from t = T to 1 with actions from ``action_provider``.

    The provider is either an iterable of actions in rollout order or a
    callable mapping the current state to an action.
    """
    counter = NfeCounter()
    state = invert(task, sched)
    if callable(action_provider):
        next_action = action_provider
    else:
        it = iter(action_provider)

        def next_action(_state):
            try:
                return next(it)
            except StopIteration:
                raise ProviderExhausted(f"no action for t={_state.t}") from None

    states, actions = [], []
    while state.t > 0:
        a = next_action(state)
        states.append(state)
        actions.append(a)
        state = denoise_step(state, task, a, sched, space, counter)
    return EpisodeRecord(states, actions, state.x, counter.count)


# ---- batched dynamics ---------------------------------------------------------


@dataclass
class TaskBatch:
    """Stacked tasks; vector fields have shape (B, D), scalars shape (B,)."""

    i_src: np.ndarray
    c_edit: np.ndarray
    drift: np.ndarray
    mask: np.ndarray
    leak_rho: np.ndarray
    pull_kappa: np.ndarray
    gate_damp: np.ndarray
    gate_suppress: np.ndarray
    eps_star: np.ndarray

    @classmethod
    def stack(cls, tasks: Sequence[EditTask]) -> "TaskBatch":
        if not tasks:
            raise ValueError("empty task batch")
        return cls(**{f.name: np.stack([np.asarray(getattr(t, f.name), dtype=np.float64) for t in tasks])
                      for f in fields(cls)})

    def take(self, idx) -> "TaskBatch":
        return TaskBatch(**{f.name: getattr(self, f.name)[idx] for f in fields(self)})

    @property
    def B(self) -> int:
        return self.i_src.shape[0]

    def edit_condition(self) -> np.ndarray:
        m = self.mask
        leak = self.leak_rho[:, None]
        return m * self.c_edit + (1 - m) * (self.i_src + leak * (self.drift - self.i_src))


def batch_invert(tb: TaskBatch, sched: NoiseSchedule) -> np.ndarray:
    return forward_sample(tb.i_src, sched.T, tb.eps_star, sched)


def batch_denoise(x: np.ndarray, t: int, tb: TaskBatch, idx: np.ndarray, sched: NoiseSchedule,
                  space: HyperSpace, nfe: np.ndarray | None = None) -> np.ndarray:
    """Vectorised ``denoise_step`` for a batch sharing the timestep ``t``."""
    if t < 1:
        raise ValueError("cannot denoise past t = 0")
    is_edit, gate, w = _action_parts(space, idx)
    m = tb.mask
    e, g = is_edit[:, None], gate[:, None]
    target = np.where(e, m * tb.c_edit + (1 - m) * tb.drift, tb.i_src)
    weight = m + (1 - m) * tb.leak_rho[:, None]
    gated = weight * (m * tb.gate_damp[:, None] + (1 - m) * tb.gate_suppress[:, None])
    weight = np.where(e, np.where(g, gated, weight), 1.0)
    x0 = implied_x0(x, t, tb.eps_star, sched)
    x0_hat = x0 + (tb.pull_kappa * w)[:, None] * weight * (target - x0)
    if nfe is not None:
        nfe += 1
    return ddim_step(x0_hat, t, tb.eps_star, sched)


def batch_rollout(tb: TaskBatch, sched: NoiseSchedule, space: HyperSpace, actions: np.ndarray):
    """Roll out fixed schedules; ``actions`` has shape (B, T, K) in rollout order.

    Returns ``(final_x0, nfe)`` with per-episode NFE counts.
    """
    T = sched.T
    if actions.shape[:2] != (tb.B, T):
        raise ValueError(f"actions shape {actions.shape} does not match (B={tb.B}, T={T}, K)")
    space.validate_indices(actions)
    nfe = np.zeros(tb.B, dtype=np.int64)
    x = batch_invert(tb, sched)
    for k, t in enumerate(range(T, 0, -1)):
        x = batch_denoise(x, t, tb, actions[:, k], sched, space, nfe)
    return x, nfe


# ---- task files ---------------------------------------------------------------

TASK_FORMAT = "hyperedit-tasks"
TASK_VERSION = 1


def write_tasks(path, tasks: Sequence[EditTask], header: dict | None = None) -> None:
    """Line-delimited JSON: one header record, then one record per task.

    ``json`` writes floats with ``repr`` so every value round-trips exactly.
    """
    head = {"format": TASK_FORMAT, "version": TASK_VERSION, "count": len(tasks)}
    head.update(header or {})
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(head, sort_keys=True) + "\n")
        for t in tasks:
            fh.write(json.dumps(t.to_dict(), sort_keys=True) + "\n")


def read_tasks(path) -> tuple[dict, list[EditTask]]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty task file")
    head = json.loads(lines[0])
    if head.get("format") != TASK_FORMAT:
        raise ValueError(f"{path}: not a task file")
    if head.get("version") != TASK_VERSION:
        raise ValueError(f"{path}: unsupported task file version {head.get('version')}")
    tasks = [EditTask.from_dict(json.loads(ln)) for ln in lines[1:]]
    if head.get("count", len(tasks)) != len(tasks):
        raise ValueError(f"{path}: header count {head['count']} != {len(tasks)} records")
    return head, tasks
