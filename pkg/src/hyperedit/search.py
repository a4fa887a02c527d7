"""Brute-force and random search over global configs, and the policy comparison table.

Every rollout here is counted in NFEs (denoiser calls): a grid of G configs
costs exactly ``T * G`` while a policy rollout costs ``T``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffusion import NoiseSchedule
from .env import EditTask, TaskBatch, batch_rollout
from .nets import Net
from .ppo import collect, inversion_steps
from .reward import RewardBreakdown, RewardConfig, batch_compose, compose
from .space import GlobalConfig, HyperSpace, StepAction, global_to_perstep


@dataclass
class SearchResult:
    best_config: GlobalConfig
    best_reward: float
    nfe_count: int
    evaluations: list = field(default_factory=list)  # (GlobalConfig, reward) in evaluation order


def default_grid(T: int, space: HyperSpace, gate_points: int = 11) -> list[GlobalConfig]:
    """All (r, gate ratio, scale) triples: r in 0..T, evenly spaced ratios in [0, 1], every scale."""
    ratios = np.linspace(0.0, 1.0, gate_points) if space.head_index("binary_gate") is not None else [0.0]
    n_scales = len(space.scale_values())
    return [GlobalConfig(r, float(g), s) for r in range(T + 1) for g in ratios for s in range(n_scales)]


def r_only_grid(T: int, space: HyperSpace) -> list[GlobalConfig]:
    """Inversion step sweep with the other heads at their defaults."""
    d = space.default_config(T)
    return [GlobalConfig(r, d.gate_ratio, d.scale_index) for r in range(T + 1)]


def grid_actions(grid, T: int, space: HyperSpace) -> np.ndarray:
    return np.array([[a.indices for a in global_to_perstep(c, T, space)] for c in grid], dtype=np.int64)


def score_configs(task: EditTask, sched: NoiseSchedule, space: HyperSpace, grid, reward_cfg: RewardConfig):
    """Roll out every config on ``task``; returns (rewards, per-config NFE)."""
    if not grid:
        raise ValueError("empty search grid")
    acts = grid_actions(grid, sched.T, space)
    tb = TaskBatch.stack([task]).take(np.zeros(len(grid), dtype=np.int64))
    x0, nfe = batch_rollout(tb, sched, space, acts)
    total, _, _ = batch_compose(x0, tb, reward_cfg, [task] * len(grid))
    return total, nfe


def brute_force(task: EditTask, sched: NoiseSchedule, space: HyperSpace, grid, reward_cfg: RewardConfig
                ) -> SearchResult:
    total, nfe = score_configs(task, sched, space, grid, reward_cfg)
    i = int(np.argmax(total))  # first maximiser in grid order
    return SearchResult(grid[i], float(total[i]), int(nfe.sum()), list(zip(grid, total.tolist())))


def random_search(task: EditTask, sched: NoiseSchedule, space: HyperSpace, grid, budget: int,
                  reward_cfg: RewardConfig, seed: int) -> SearchResult:
    """Evaluate the first ``budget`` configs of a seeded permutation of ``grid``.

    Sampling without replacement makes a larger budget a superset of a smaller
    one under the same seed, and the full budget covers the whole grid.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    order = np.random.default_rng(seed).permutation(len(grid))[:budget]
    picked = [grid[i] for i in order]
    total, nfe = score_configs(task, sched, space, picked, reward_cfg)
    i = int(np.argmax(total))
    return SearchResult(picked[i], float(total[i]), int(nfe.sum()), list(zip(picked, total.tolist())))


@dataclass
class PolicyEval:
    reward: RewardBreakdown
    actions: list          # StepAction per step, rollout order
    final_x0: np.ndarray
    nfe_count: int
    inversion_step: int


def evaluate_policy(policy: Net, task: EditTask, sched: NoiseSchedule, space: HyperSpace,
                    reward_cfg: RewardConfig, greedy: bool = True, seed: int | None = None) -> PolicyEval:
    """Single policy-driven edit: one denoiser call per step."""
    if policy.dims.out_sizes != space.sizes:
        raise ValueError(f"checkpoint heads {policy.dims.out_sizes} do not match space {space.sizes}")
    rng = None if greedy else np.random.default_rng(seed)
    b = collect(policy, None, None, TaskBatch.stack([task]), sched, space, reward_cfg, rng, greedy=greedy,
                tasks=[task])
    acts = [StepAction(tuple(a)) for a in b.actions[0]]
    return PolicyEval(compose(b.final_x0[0], task, reward_cfg), acts, b.final_x0[0], int(b.nfe[0]),
                      int(inversion_steps(b.actions, space)[0]))


def policy_rewards(policy: Net, tasks: list, sched: NoiseSchedule, space: HyperSpace,
                   reward_cfg: RewardConfig) -> np.ndarray:
    """Greedy policy reward for many tasks in one batched rollout."""
    b = collect(policy, None, None, TaskBatch.stack(tasks), sched, space, reward_cfg, None, greedy=True,
                tasks=tasks)
    return b.reward


COMPARE_COLUMNS = ("task", "default", "trials_1", "trials_2", "trials_3", "policy", "optimal",
                   "normalized", "nfe_default", "nfe_trials_1", "nfe_trials_2", "nfe_trials_3",
                   "nfe_policy", "nfe_optimal")


def normalized_score(r_policy: float, r_default: float, r_opt: float, tol: float = 1e-9) -> float:
    """(policy - default) / (optimal - default); 1.0 when default is already optimal and matched."""
    gap = r_opt - r_default
    if gap <= tol:
        return 1.0 if r_policy >= r_default - tol else 0.0
    return (r_policy - r_default) / gap


def compare(policy: Net, tasks: list, sched: NoiseSchedule, space: HyperSpace, grid, reward_cfg: RewardConfig,
            seed: int, ks=(1, 2, 3)) -> list[dict]:
    """Per-task rows plus a final aggregate row (mean rewards, summed NFEs).

    The policy acts per step, so it can beat the global-grid optimum; the
    ``optimal`` column is the best global config, not a bound on the policy.
    """
    T = sched.T
    default = space.default_config(T)
    rows = []
    pol = [evaluate_policy(policy, t, sched, space, reward_cfg) for t in tasks]
    for j, task in enumerate(tasks):
        bf = brute_force(task, sched, space, grid, reward_cfg)
        d_total, d_nfe = score_configs(task, sched, space, [default], reward_cfg)
        row = {"task": task.seed, "default": float(d_total[0]), "nfe_default": int(d_nfe.sum())}
        for k in ks:
            rs = random_search(task, sched, space, grid, k, reward_cfg, seed + j)
            row[f"trials_{k}"] = rs.best_reward
            row[f"nfe_trials_{k}"] = rs.nfe_count
        row["policy"] = pol[j].reward.total
        row["nfe_policy"] = pol[j].nfe_count
        row["optimal"] = bf.best_reward
        row["nfe_optimal"] = bf.nfe_count
        row["normalized"] = normalized_score(row["policy"], row["default"], row["optimal"])
        rows.append(row)
    agg = {"task": "mean"}
    for c in COMPARE_COLUMNS[1:]:
        vals = [r[c] for r in rows]
        agg[c] = int(np.sum(vals)) if c.startswith("nfe_") else (float(np.mean(vals)) if vals else float("nan"))
    rows.append(agg)
    return rows
