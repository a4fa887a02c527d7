"""Phase-1 prior imitation and Phase-2 PPO with a KL penalty to the Phase-1 policy."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .diffusion import NoiseSchedule
from .env import TaskBatch, batch_denoise, batch_invert, batch_rollout
from .nets import AdamState, Net, adam_step, policy_forward, value_forward
from .reward import RewardConfig, batch_compose
from .space import PROMPT, EDIT, HyperSpace, PriorConfig, global_to_perstep, sample_prior

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("episode", "reward_total", "r_edit", "r_noedit", "kl", "policy_loss", "value_loss",
                  "mean_inversion_step")


class NumericalFailure(RuntimeError):
    """A loss or gradient went non-finite; ``dump`` holds the offending state."""

    def __init__(self, msg: str, dump: dict):
        super().__init__(msg)
        self.dump = dump


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.999
    lam: float = 0.95
    clip_eps: float = 0.2
    kl_coeff: float = 0.02
    lr: float = 5e-5
    value_lr: float | None = None
    episodes: int = 2500
    batch_episodes: int = 8
    epochs_per_batch: int = 1
    normalize_advantages: bool = True
    alg2_literal: bool = False

    def __post_init__(self) -> None:
        if not (0 < self.gamma <= 1 and 0 < self.lam <= 1):
            raise ValueError("gamma and lam must lie in (0, 1]")
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.kl_coeff < 0 or self.lr <= 0:
            raise ValueError("kl_coeff must be >= 0 and lr > 0")
        if self.episodes < 0 or self.batch_episodes < 1 or self.epochs_per_batch < 1:
            raise ValueError("episodes >= 0, batch_episodes >= 1 and epochs_per_batch >= 1 required")


# ---- loss pieces ----------------------------------------------------------------


def compute_gae(values, reward, cfg: PpoConfig):
    """Advantages and returns for one terminal-reward episode (rollout order).

    ``values`` may also be a (B, T) array with a (B,) ``reward``. The default
    pays the reward on the last step only and bootstraps 0 after it; with
    ``alg2_literal`` the reward enters every TD error.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.shape[-1] == 0:
        raise ValueError("empty value sequence")
    single = v.ndim == 1
    v = np.atleast_2d(v)
    R = np.broadcast_to(np.asarray(reward, dtype=np.float64), v.shape[:1])
    T = v.shape[1]
    rew = np.zeros_like(v)
    if cfg.alg2_literal:
        rew += R[:, None]
    else:
        rew[:, -1] = R
    v_next = np.concatenate([v[:, 1:], np.zeros((v.shape[0], 1))], axis=1)
    delta = rew + cfg.gamma * v_next - v
    adv = np.zeros_like(v)
    acc = np.zeros(v.shape[0])
    for k in range(T - 1, -1, -1):
        acc = delta[:, k] + cfg.gamma * cfg.lam * acc
        adv[:, k] = acc
    ret = adv + v
    return (adv[0], ret[0]) if single else (adv, ret)


def clipped_surrogate(new_logp, old_logp, advantage, clip_eps: float):
    u = np.exp(np.asarray(new_logp, dtype=np.float64) - old_logp)
    out = np.minimum(u * advantage, np.clip(u, 1 - clip_eps, 1 + clip_eps) * advantage)
    return out if np.ndim(out) else float(out)


def _check_support(p, q):
    if np.any((q <= 0) & (p > 0)):
        raise ValueError("KL undefined: reference assigns zero mass where the policy does not")


def kl_rows(new_dists: list, ref_dists: list) -> np.ndarray:
    """Per-row KL(new || ref), summed over heads."""
    if len(new_dists) != len(ref_dists):
        raise ValueError("head structure mismatch")
    total = 0.0
    for p, q in zip(new_dists, ref_dists):
        p, q = np.atleast_2d(p), np.atleast_2d(q)
        if p.shape != q.shape:
            raise ValueError(f"head shape mismatch {p.shape} vs {q.shape}")
        _check_support(p, q)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(p > 0, p * (np.log(p) - np.log(np.where(q > 0, q, 1.0))), 0.0)
        total = total + terms.sum(axis=-1)
    return np.asarray(total)


def kl_to_reference(new_dists: list, ref_dists: list) -> float:
    """Summed-over-heads categorical KL, averaged over steps (rows)."""
    return float(np.mean(kl_rows(new_dists, ref_dists)))


def head_cross_entropy(logp: list, labels: np.ndarray) -> np.ndarray:
    """Mean cross-entropy per head; ``labels`` has shape (S, K)."""
    S = labels.shape[0]
    return np.array([-lp[np.arange(S), labels[:, k]].mean() for k, lp in enumerate(logp)])


def _gather(logp: list, actions: np.ndarray) -> np.ndarray:
    S = actions.shape[0]
    return sum(lp[np.arange(S), actions[:, k]] for k, lp in enumerate(logp))


def _sample(probs: list, rng: np.random.Generator) -> np.ndarray:
    B = probs[0].shape[0]
    out = np.empty((B, len(probs)), dtype=np.int64)
    for k, p in enumerate(probs):
        u = rng.random(B)
        c = np.cumsum(p, axis=1)
        out[:, k] = np.minimum((u[:, None] > c).sum(axis=1), p.shape[1] - 1)
    return out


def _guard(name: str, value, dump: dict) -> None:
    if not np.all(np.isfinite(value)):
        raise NumericalFailure(f"non-finite {name}", dump)


def inversion_steps(actions: np.ndarray, space: HyperSpace) -> np.ndarray:
    """Vectorised perstep_to_inversion_step for (B, T, K) rollouts."""
    ip = space.head_index(PROMPT)
    B, T = actions.shape[:2]
    if ip is None:
        return np.zeros(B, dtype=np.int64)
    is_edit = actions[:, :, ip] == EDIT
    first = np.argmax(is_edit, axis=1)
    return np.where(is_edit.any(axis=1), T - first, 0)


# ---- phase 1 ----------------------------------------------------------------------


def prior_labels(space: HyperSpace, T: int, n: int, rng, prior: PriorConfig = PriorConfig()) -> np.ndarray:
    """(n, T, K) per-step label schedules drawn from the Phase-1 prior."""
    return np.array([[a.indices for a in global_to_perstep(sample_prior(space, T, rng, prior), T, space)]
                     for _ in range(n)], dtype=np.int64)


def _labelled_states(tb: TaskBatch, labels: np.ndarray, sched: NoiseSchedule, space: HyperSpace):
    """Visit the states reached by following ``labels``; rows are (episode-major, step)."""
    T = sched.T
    xs = np.empty((tb.B, T, tb.i_src.shape[1]))
    x = batch_invert(tb, sched)
    for k, t in enumerate(range(T, 0, -1)):
        xs[:, k] = x
        x = batch_denoise(x, t, tb, labels[:, k], sched, space)
    ts = np.tile(np.arange(T, 0, -1), tb.B)
    rows = np.repeat(np.arange(tb.B), T)
    return xs.reshape(-1, xs.shape[-1]), ts, rows


def pretrain_phase1(policy: Net, space: HyperSpace, tasks: TaskBatch, sched: NoiseSchedule,
                    steps: int, seed: int, lr: float = 1e-3, batch_episodes: int = 16,
                    prior: PriorConfig = PriorConfig(), label_smoothing: float = 0.0) -> list[float]:
    """Fit the policy to per-step prior labels by cross-entropy; trains in place.

    Each optimiser step draws ``batch_episodes`` (task, prior config) pairs,
    follows the labelled schedule through the environment and regresses every
    visited state onto its label. ``label_smoothing`` mixes each one-hot
    target with the uniform distribution so that no head starts Phase 2 with
    zero exploration mass. Returns the loss history.
    """
    if not 0.0 <= label_smoothing < 1.0:
        raise ValueError("label_smoothing must lie in [0, 1)")
    if policy.dims.out_sizes != space.sizes:
        raise ValueError(f"policy heads {policy.dims.out_sizes} do not match space {space.sizes}")
    rng = np.random.default_rng(seed)
    state = AdamState()
    T = sched.T
    history = []
    for _ in range(steps):
        pick = rng.integers(0, tasks.B, batch_episodes)
        tb = tasks.take(pick)
        labels = prior_labels(space, T, batch_episodes, rng, prior)
        xs, ts, rows = _labelled_states(tb, labels, sched, space)
        flat = labels.reshape(-1, space.K)
        out = policy_forward(policy, xs, ts, tb.take(rows))
        S = flat.shape[0]
        loss = 0.0
        douts = []
        for k, (p, lp) in enumerate(zip(out.probs, out.logp)):
            target = np.full_like(p, label_smoothing / p.shape[1])
            target[np.arange(S), flat[:, k]] += 1.0 - label_smoothing
            loss -= float((target * lp).sum() / S)
            douts.append((p - target) / S)
        _guard("phase-1 loss", loss, {"step": len(history)})
        adam_step(policy, policy.backward(douts), state, lr)
        history.append(loss)
    return history


# ---- phase 2 ----------------------------------------------------------------------


@dataclass
class Batch:
    tasks: TaskBatch
    xs: np.ndarray        # (B, T, D)
    actions: np.ndarray   # (B, T, K)
    logp: np.ndarray      # (B, T) behaviour log-prob summed over heads
    probs: list           # per head (B, T, N_k) behaviour distributions
    ref_probs: list       # per head (B, T, N_k) Phase-1 distributions
    values: np.ndarray    # (B, T)
    final_x0: np.ndarray  # (B, D)
    reward: np.ndarray
    r_edit: np.ndarray
    r_noedit: np.ndarray
    nfe: np.ndarray


def collect(policy: Net, ref: Net, value: Net, tb: TaskBatch, sched: NoiseSchedule, space: HyperSpace,
            reward_cfg: RewardConfig, rng: np.random.Generator | None, greedy: bool = False,
            tasks=None) -> Batch:
    """Roll out ``policy`` on every task in ``tb`` (sampling, or argmax when ``greedy``)."""
    T, B = sched.T, tb.B
    xs = np.empty((B, T, tb.i_src.shape[1]))
    actions = np.empty((B, T, space.K), dtype=np.int64)
    logp = np.empty((B, T))
    values = np.empty((B, T))
    probs = [np.empty((B, T, n)) for n in space.sizes]
    ref_probs = [np.empty((B, T, n)) for n in space.sizes]
    nfe = np.zeros(B, dtype=np.int64)
    x = batch_invert(tb, sched)
    for k, t in enumerate(range(T, 0, -1)):
        tt = np.full(B, t)
        out = policy_forward(policy, x, tt, tb)
        if greedy:
            a = np.stack([p.argmax(axis=1) for p in out.probs], axis=1)
        else:
            a = _sample(out.probs, rng)
        if ref is not None:
            rout = policy_forward(ref, x, tt, tb)
            for h in range(space.K):
                ref_probs[h][:, k] = rout.probs[h]
        values[:, k] = value_forward(value, x, tt, tb) if value is not None else 0.0
        for h in range(space.K):
            probs[h][:, k] = out.probs[h]
        xs[:, k] = x
        actions[:, k] = a
        logp[:, k] = _gather(out.logp, a)
        x = batch_denoise(x, t, tb, a, sched, space, nfe)
    total, r_edit, r_noedit = batch_compose(x, tb, reward_cfg, tasks)
    return Batch(tb, xs, actions, logp, probs, ref_probs, values, x, total, r_edit, r_noedit, nfe)


def _flat(batch: Batch):
    B, T = batch.actions.shape[:2]
    rows = np.repeat(np.arange(B), T)
    ts = np.tile(np.arange(T, 0, -1), B)
    return batch.xs.reshape(B * T, -1), ts, batch.tasks.take(rows)


def ppo_update(policy: Net, value: Net, batch: Batch, cfg: PpoConfig, pstate: AdamState,
               vstate: AdamState) -> tuple[float, float]:
    """One pass of clipped-surrogate + KL policy loss and value regression."""
    B, T, K = batch.actions.shape
    adv, ret = compute_gae(batch.values, batch.reward, cfg)
    adv, ret = adv.reshape(-1), ret.reshape(-1)
    if cfg.normalize_advantages and adv.size > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    xs, ts, tb = _flat(batch)
    acts = batch.actions.reshape(-1, K)
    old_logp = batch.logp.reshape(-1)
    ref = [q.reshape(B * T, -1) for q in batch.ref_probs]
    S = B * T

    out = policy_forward(policy, xs, ts, tb)
    new_logp = _gather(out.logp, acts)
    u = np.exp(new_logp - old_logp)
    surr = clipped_surrogate(new_logp, old_logp, adv, cfg.clip_eps)
    kl = kl_rows(out.probs, ref)
    ploss = -float(np.mean(surr - cfg.kl_coeff * kl))
    # d surr / d logp: u*A where the unclipped branch is active, else 0
    unclipped = u * adv <= np.clip(u, 1 - cfg.clip_eps, 1 + cfg.clip_eps) * adv
    g_clip = np.where(unclipped, u * adv, 0.0)
    douts = []
    for k in range(K):
        p, lp = out.probs[k], out.logp[k]
        onehot = np.zeros_like(p)
        onehot[np.arange(S), acts[:, k]] = 1.0
        with np.errstate(divide="ignore"):
            lq = np.log(ref[k])
        kl_k = (p * (lp - lq)).sum(axis=1, keepdims=True)
        d_kl = p * (lp - lq - kl_k)
        douts.append(-(g_clip[:, None] * (onehot - p) - cfg.kl_coeff * d_kl) / S)
    pgrads = policy.backward(douts)
    _guard("policy loss", [ploss] + [g.sum() for g in pgrads.values()],
           {"policy_loss": ploss, "advantages": adv.tolist(), "ratio": u.tolist()})

    v = value_forward(value, xs, ts, tb)
    vloss = float(np.mean((v - ret) ** 2))
    vgrads = value.backward([(2.0 * (v - ret) / S)[:, None]])
    _guard("value loss", [vloss] + [g.sum() for g in vgrads.values()],
           {"value_loss": vloss, "returns": ret.tolist(), "values": v.tolist()})
    adam_step(policy, pgrads, pstate, cfg.lr)
    adam_step(value, vgrads, vstate, cfg.value_lr or cfg.lr)
    return ploss, vloss


@dataclass
class Phase2Result:
    policy: Net
    value: Net
    metrics: list = field(default_factory=list)


def train_phase2(policy: Net, ref: Net, value: Net, tasks: TaskBatch, sched: NoiseSchedule,
                 space: HyperSpace, reward_cfg: RewardConfig, cfg: PpoConfig, seed: int,
                 task_objs=None) -> Phase2Result:
    """Online PPO from the Phase-1 policy; ``ref`` is kept frozen for the KL term.

    Episodes draw tasks uniformly from ``tasks``. Returns trained nets and one
    metrics row (dict keyed by METRIC_COLUMNS) per episode.
    """
    if policy.dims.out_sizes != space.sizes or ref.dims.out_sizes != space.sizes:
        raise ValueError("policy heads do not match the hyperparameter space")
    rng = np.random.default_rng(seed)
    pstate, vstate = AdamState(), AdamState()
    res = Phase2Result(policy, value)
    done = 0
    while done < cfg.episodes:
        n = min(cfg.batch_episodes, cfg.episodes - done)
        pick = rng.integers(0, tasks.B, n)
        objs = [task_objs[i] for i in pick] if task_objs is not None else None
        batch = collect(policy, ref, value, tasks.take(pick), sched, space, reward_cfg, rng, tasks=objs)
        kl_ep = kl_rows([p.reshape(n * sched.T, -1) for p in batch.probs],
                        [q.reshape(n * sched.T, -1) for q in batch.ref_probs]).reshape(n, -1).mean(axis=1)
        for _ in range(cfg.epochs_per_batch):
            ploss, vloss = ppo_update(policy, value, batch, cfg, pstate, vstate)
        inv = inversion_steps(batch.actions, space)
        for i in range(n):
            res.metrics.append({
                "episode": done + i, "reward_total": float(batch.reward[i]), "r_edit": float(batch.r_edit[i]),
                "r_noedit": float(batch.r_noedit[i]), "kl": float(kl_ep[i]), "policy_loss": ploss,
                "value_loss": vloss, "mean_inversion_step": float(inv.mean()),
            })
        done += n
        if done % (50 * cfg.batch_episodes) < n:
            recent = [m["reward_total"] for m in res.metrics[-50 * cfg.batch_episodes:]]
            log.info("episode %d  mean reward %.4f", done, float(np.mean(recent)))
    return res
