"""Discrete K-head action spaces, global <-> per-step schedules, and Phase-1 priors."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

PROMPT = "prompt_switch"
GATE = "binary_gate"
SCALAR = "discrete_scalar"
KINDS = (PROMPT, GATE, SCALAR)

SRC, EDIT = 0, 1
DEFAULT_SCALES = (0.5, 1.0, 1.5, 2.0, 3.0, 5.0)


@dataclass(frozen=True)
class HeadSpec:
    name: str
    kind: str
    values: tuple
    default_index: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", tuple(self.values))
        if self.kind not in KINDS:
            raise ValueError(f"unknown head kind {self.kind!r}")
        n = len(self.values)
        if n < (1 if self.kind == SCALAR else 2):
            raise ValueError(f"head {self.name!r} has too few values ({n})")
        if self.kind in (PROMPT, GATE) and n != 2:
            raise ValueError(f"{self.kind} head {self.name!r} must have exactly two values")
        if not 0 <= self.default_index < n:
            raise ValueError(f"default_index {self.default_index} out of range for {self.name!r}")

    @property
    def n(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class HyperSpace:
    """Ordered heads; at most one head of each kind.

    ``default_r_fraction`` and ``default_gate_ratio`` define the hand-tuned
    default global config used as the baseline column in comparisons.
    """

    heads: tuple
    default_r_fraction: float = 0.8
    default_gate_ratio: float = 0.4

    def __post_init__(self) -> None:
        heads = tuple(self.heads)
        object.__setattr__(self, "heads", heads)
        if not heads:
            raise ValueError("a HyperSpace needs at least one head")
        kinds = [h.kind for h in heads]
        for k in KINDS:
            if kinds.count(k) > 1:
                raise ValueError(f"at most one {k} head is supported")
        if len({h.name for h in heads}) != len(heads):
            raise ValueError("head names must be unique")
        if not 0.0 <= self.default_r_fraction <= 1.0 or not 0.0 <= self.default_gate_ratio <= 1.0:
            raise ValueError("default fractions must lie in [0, 1]")

    @property
    def K(self) -> int:
        return len(self.heads)

    @property
    def sizes(self) -> tuple:
        return tuple(h.n for h in self.heads)

    def head_index(self, kind: str) -> int | None:
        for i, h in enumerate(self.heads):
            if h.kind == kind:
                return i
        return None

    def scale_values(self) -> np.ndarray:
        i = self.head_index(SCALAR)
        return np.array([1.0] if i is None else self.heads[i].values, dtype=np.float64)

    def scale_default(self) -> int:
        i = self.head_index(SCALAR)
        return 0 if i is None else self.heads[i].default_index

    def default_config(self, T: int) -> "GlobalConfig":
        return GlobalConfig(
            r=int(round(self.default_r_fraction * T)),
            gate_ratio=self.default_gate_ratio,
            scale_index=self.scale_default(),
        )

    def validate_indices(self, indices) -> np.ndarray:
        idx = np.asarray(indices, dtype=np.int64)
        if idx.shape[-1] != self.K:
            raise ValueError(f"expected {self.K} head indices, got shape {idx.shape}")
        if np.any(idx < 0) or np.any(idx >= np.array(self.sizes)):
            raise ValueError(f"head index out of range: {idx}")
        return idx

    def to_dict(self) -> dict:
        return {
            "heads": [
                {"name": h.name, "kind": h.kind, "values": list(h.values), "default_index": h.default_index}
                for h in self.heads
            ],
            "default_r_fraction": self.default_r_fraction,
            "default_gate_ratio": self.default_gate_ratio,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HyperSpace":
        heads = tuple(
            HeadSpec(h["name"], h["kind"], tuple(h["values"]), int(h.get("default_index", 0)))
            for h in d["heads"]
        )
        return cls(
            heads,
            default_r_fraction=float(d.get("default_r_fraction", 0.8)),
            default_gate_ratio=float(d.get("default_gate_ratio", 0.4)),
        )


def p2p_space(scales: Sequence[float] = DEFAULT_SCALES, scale_default: float = 1.0) -> HyperSpace:
    """Prompt switch, one attention-replacement gate, and a discrete scale: N = (2, 2, len(scales))."""
    scales = tuple(float(s) for s in scales)
    return HyperSpace((
        HeadSpec("prompt", PROMPT, ("src", "edit"), EDIT),
        HeadSpec("gate", GATE, (0, 1), 0),
        HeadSpec("scale", SCALAR, scales, scales.index(scale_default) if scale_default in scales else 0),
    ))


@dataclass(frozen=True)
class StepAction:
    indices: tuple

    def __post_init__(self) -> None:
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))


@dataclass(frozen=True)
class GlobalConfig:
    r: int
    gate_ratio: float = 0.0
    scale_index: int = 0

    def __post_init__(self) -> None:
        if self.r < 0:
            raise ValueError("inversion step r must be >= 0")
        if not 0.0 <= self.gate_ratio <= 1.0:
            raise ValueError("gate_ratio must lie in [0, 1]")


def gate_steps(gate_ratio: float, T: int) -> int:
    # tolerance absorbs float products like 0.7 * 10 = 7.000000000000001 / 0.29 * 100
    return int(math.floor(gate_ratio * T + 1e-9))


def global_to_perstep(cfg: GlobalConfig, T: int, space: HyperSpace) -> list[StepAction]:
    """Expand a global config into per-step actions in rollout order t = T..1."""
    if cfg.r > T:
        raise ValueError(f"r={cfg.r} exceeds T={T}")
    ip, ig, isc = space.head_index(PROMPT), space.head_index(GATE), space.head_index(SCALAR)
    if isc is not None and not 0 <= cfg.scale_index < space.heads[isc].n:
        raise ValueError(f"scale_index {cfg.scale_index} out of range")
    n_gate = gate_steps(cfg.gate_ratio, T)
    out = []
    for k, t in enumerate(range(T, 0, -1)):
        idx = [h.default_index for h in space.heads]
        if ip is not None:
            idx[ip] = EDIT if t <= cfg.r else SRC
        if ig is not None:
            idx[ig] = 1 if k < n_gate else 0
        if isc is not None:
            idx[isc] = cfg.scale_index
        out.append(StepAction(tuple(idx)))
    return out


def perstep_to_inversion_step(actions: Sequence, space: HyperSpace) -> int:
    """Largest t whose prompt head selects the edit prompt (0 if none).

    ``actions`` are in rollout order, so ``actions[0]`` acts at t = len(actions).
    """
    if len(actions) == 0:
        raise ValueError("empty action sequence")
    ip = space.head_index(PROMPT)
    if ip is None:
        return 0
    T = len(actions)
    for k, a in enumerate(actions):
        idx = a.indices if isinstance(a, StepAction) else a
        if idx[ip] == EDIT:
            return T - k
    return 0


def prior_r_bounds(T: int, lo: float = 0.35, hi: float = 0.95) -> tuple[int, int]:
    a, b = math.ceil(lo * T - 1e-9), math.floor(hi * T + 1e-9)
    if a > b:
        raise ValueError(f"empty prior range for r at T={T}")
    return a, b


@dataclass(frozen=True)
class PriorConfig:
    r_range: tuple = (0.35, 0.95)
    gate_range: tuple = (0.2, 0.8)

    def __post_init__(self) -> None:
        for lo, hi in (self.r_range, self.gate_range):
            if not 0.0 <= lo <= hi <= 1.0:
                raise ValueError(f"invalid prior range ({lo}, {hi})")


def sample_prior(space: HyperSpace, T: int, seed, prior: PriorConfig = PriorConfig()) -> GlobalConfig:
    """Draw one global config from the Phase-1 prior.

    ``seed`` may be an int or an existing ``np.random.Generator``.
    """
    if T < 2:
        raise ValueError("prior sampling needs T >= 2")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    a, b = prior_r_bounds(T, *prior.r_range)
    r = int(rng.integers(a, b + 1))
    g = float(rng.uniform(*prior.gate_range))
    return GlobalConfig(r=r, gate_ratio=g, scale_index=space.scale_default())


def prior_marginals(space: HyperSpace, T: int, prior: PriorConfig = PriorConfig()) -> list[np.ndarray]:
    """Exact per-step, per-head prior marginals; entry k has shape (T, N_k), rows in rollout order.

    Computed by enumerating the uniform r support and integrating the gate
    ratio density over each floor bucket.
    """
    a, b = prior_r_bounds(T, *prior.r_range)
    rs = np.arange(a, b + 1)
    glo, ghi = prior.gate_range
    # P(floor(g*T) = n) for g ~ U[glo, ghi]
    if ghi > glo:
        gate_pmf = {n: max(0.0, min(ghi, (n + 1) / T) - max(glo, n / T)) / (ghi - glo) for n in range(T + 1)}
    else:
        gate_pmf = {gate_steps(glo, T): 1.0}
    out = []
    ts = np.arange(T, 0, -1)
    for h in space.heads:
        m = np.zeros((T, h.n))
        if h.kind == PROMPT:
            p_edit = np.array([np.mean(rs >= t) for t in ts])
            m[:, EDIT], m[:, SRC] = p_edit, 1.0 - p_edit
        elif h.kind == GATE:
            for k in range(T):
                m[k, 1] = sum(p for n, p in gate_pmf.items() if k < n)
            m[:, 0] = 1.0 - m[:, 1]
        else:
            m[:, h.default_index] = 1.0
        out.append(m)
    return out
