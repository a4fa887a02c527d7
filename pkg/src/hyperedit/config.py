"""Experiment configuration: sectioned YAML, validated into the library's config objects.

Every section is optional; missing keys take the library defaults. The
config hash covers everything except the ``seeds`` section, so a checkpoint
trained under one master seed is still usable with another.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .diffusion import make_linear_schedule
from .env import GenConfig
from .ppo import PpoConfig
from .reward import RewardConfig, threshold_judge
from .space import HyperSpace, PriorConfig, p2p_space

SEED_ENV = "HYPEREDIT_SEED"

SECTIONS = ("schedule", "environment", "space", "reward", "phase1", "phase2", "search", "network", "seeds")


class ConfigError(ValueError):
    """Unknown keys, malformed values, or invalid ranges in an experiment config."""


@dataclass(frozen=True)
class Phase1Config:
    steps: int = 3000
    lr: float = 1e-3
    batch_episodes: int = 16
    label_smoothing: float = 0.03
    r_range: tuple = (0.35, 0.95)
    gate_range: tuple = (0.2, 0.8)

    def prior(self) -> PriorConfig:
        return PriorConfig(tuple(self.r_range), tuple(self.gate_range))


@dataclass(frozen=True)
class SearchConfig:
    gate_points: int = 11
    random_ks: tuple = (1, 2, 3)


@dataclass(frozen=True)
class NetworkConfig:
    F: int = 32
    Fc: int = 32
    E: int = 32
    Ft: int = 32
    H: int = 64


@dataclass
class ExperimentConfig:
    T: int = 50
    environment: GenConfig = field(default_factory=GenConfig)
    space: HyperSpace = field(default_factory=p2p_space)
    reward_mode: str = "masked"
    alpha: float = 30.0
    beta: float = 30.0
    judge_coeff: float = 5.0
    judge_threshold: float = 0.05
    phase1: Phase1Config = field(default_factory=Phase1Config)
    phase2: PpoConfig = field(default_factory=PpoConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    master_seed: int = 0

    def schedule(self):
        return make_linear_schedule(self.T)

    def reward(self) -> RewardConfig:
        judge = threshold_judge(self.judge_threshold) if self.reward_mode == "judge" else None
        return RewardConfig(self.alpha, self.beta, self.reward_mode, self.judge_coeff, judge)

    def to_dict(self) -> dict:
        return {
            "schedule": {"T": self.T},
            "environment": _plain(asdict(self.environment)),
            "space": self.space.to_dict(),
            "reward": {"mode": self.reward_mode, "alpha": self.alpha, "beta": self.beta,
                       "judge_coeff": self.judge_coeff, "judge_threshold": self.judge_threshold},
            "phase1": _plain(asdict(self.phase1)),
            "phase2": _plain(asdict(self.phase2)),
            "search": _plain(asdict(self.search)),
            "network": asdict(self.network),
            "seeds": {"master": self.master_seed},
        }

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("seeds")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _plain(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _build(cls, section: dict, name: str, tuples=()):
    known = {f.name for f in fields(cls)}
    extra = set(section) - known
    if extra:
        raise ConfigError(f"[{name}] unknown keys: {sorted(extra)}")
    kw = {k: tuple(v) if k in tuples else v for k, v in section.items()}
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{name}] {e}") from e


def config_from_dict(raw: dict | None) -> ExperimentConfig:
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping of sections")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")
    sec = {k: (raw.get(k) or {}) for k in SECTIONS}
    for k, v in sec.items():
        if not isinstance(v, dict):
            raise ConfigError(f"[{k}] must be a mapping")

    cfg = ExperimentConfig()
    sched = dict(sec["schedule"])
    cfg.T = sched.pop("T", cfg.T)
    if sched:
        raise ConfigError(f"[schedule] unknown keys: {sorted(sched)}")
    if not isinstance(cfg.T, int) or cfg.T < 2:
        raise ConfigError("[schedule] T must be an integer >= 2")
    cfg.environment = _build(GenConfig, sec["environment"], "environment",
                             ("mask_fraction", "leak_range", "kappa_range"))
    if sec["space"]:
        try:
            cfg.space = HyperSpace.from_dict(sec["space"])
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"[space] {e}") from e
    rw = dict(sec["reward"])
    cfg.reward_mode = rw.pop("mode", cfg.reward_mode)
    for key in ("alpha", "beta", "judge_coeff", "judge_threshold"):
        if key in rw:
            setattr(cfg, key, float(rw.pop(key)))
    if rw:
        raise ConfigError(f"[reward] unknown keys: {sorted(rw)}")
    try:
        cfg.reward()
    except ValueError as e:
        raise ConfigError(f"[reward] {e}") from e
    cfg.phase1 = _build(Phase1Config, sec["phase1"], "phase1", ("r_range", "gate_range"))
    try:
        cfg.phase1.prior()
    except ValueError as e:
        raise ConfigError(f"[phase1] {e}") from e
    cfg.phase2 = _build(PpoConfig, sec["phase2"], "phase2")
    cfg.search = _build(SearchConfig, sec["search"], "search", ("random_ks",))
    cfg.network = _build(NetworkConfig, sec["network"], "network")
    seeds = dict(sec["seeds"])
    cfg.master_seed = int(seeds.pop("master", 0))
    if seeds:
        raise ConfigError(f"[seeds] unknown keys: {sorted(seeds)}")
    env_seed = os.environ.get(SEED_ENV)
    if env_seed not in (None, ""):
        try:
            cfg.master_seed = int(env_seed)
        except ValueError as e:
            raise ConfigError(f"{SEED_ENV}={env_seed!r} is not an integer") from e
    return cfg


def load_config(path) -> ExperimentConfig:
    if path is None:
        return config_from_dict({})
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML ({e})") from e
    return config_from_dict(raw)


def derive_seed(master: int, purpose: str) -> int:
    """Independent 32-bit seed per pipeline stage, stable across runs and machines."""
    h = hashlib.sha256(f"{master}:{purpose}".encode()).digest()
    return int.from_bytes(h[:4], "little")
