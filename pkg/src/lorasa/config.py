"""Flat ``key = value`` run configuration with dotted sections.

The format is deliberately diff-friendly for sweeps: one key per line,
``#`` comments, no nesting. Hashes: ``config_hash`` covers every key;
``lineage_hash`` skips the keys a fine-tune or sweep may legitimately vary
(adapter rank/placement, fine-tune schedule, run naming), so a fine-tune can
verify it descends from the right pretraining run.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

DISCRETE_ENVS = ("hetero-grid", "homo-grid")
CONTINUOUS_ENVS = ("hetero-spread", "homo-spread")
LEARNERS = ("mappo", "a2po")
REGIMES = ("ps-id", "nps", "mtl", "cluster-shared", "ps-lora", "cluster-lora")
LORA_REGIMES = ("ps-lora", "cluster-lora")

# Keys excluded from the lineage hash (a fine-tune may vary them while still
# descending from the same pretraining run).
NON_LINEAGE_KEYS = {
    "regime.lora_rank", "regime.lora_placement",
    "phase.finetune_steps", "phase.finetune_from",
    "run.name", "run.out_root",
}


class ConfigError(ValueError):
    """Invalid or missing configuration; maps to CLI exit code 2."""


@dataclass
class RunConfig:
    env_id: str = ""
    env_n_agents: int = 3
    env_grid_size: int = 7
    env_episode_limit: int = 0          # 0 = env default
    learner: str = "mappo"
    regime_kind: str = "ps-id"
    regime_cluster_map: tuple[int, ...] = ()
    regime_lora_rank: int | str = 8
    regime_lora_placement: str = "all"
    arch_hidden_dim: int = 64
    train_gamma: float = 0.99
    train_gae_lambda: float | None = None    # default depends on action kind
    train_clip: float = 0.2
    train_epochs: int = 5
    train_num_minibatch: int = 1
    train_actor_lr: float | None = None
    train_critic_lr: float | None = None
    train_entropy_coef: float | None = None
    train_max_grad_norm: float = 10.0
    train_chunk_length: int = 10
    train_rollout_threads: int = 8
    train_rollout_length: int = 100
    phase_pretrain_steps: int = 0
    phase_milestones: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)
    phase_finetune_steps: int = 0
    phase_finetune_from: float = 1.0    # fraction of pretrain steps
    eval_episodes: int = 32
    eval_interval: int = 10             # iterations between evals
    eval_seed: int = 777000
    seeds: tuple[int, ...] = (1,)
    run_name: str = "run"
    run_out_root: str = "runs"

    # canonical "key = value" lines, kept for hashing and copying
    raw_items: dict[str, str] = field(default_factory=dict, repr=False)

    @property
    def action_kind(self) -> str:
        return "discrete" if self.env_id in DISCRETE_ENVS else "continuous"

    @property
    def gae_lambda(self) -> float:
        if self.train_gae_lambda is not None:
            return self.train_gae_lambda
        return 0.95 if self.action_kind == "discrete" else 0.93

    @property
    def actor_lr(self) -> float:
        if self.train_actor_lr is not None:
            return self.train_actor_lr
        return 5e-4 if self.action_kind == "discrete" else 3e-4

    @property
    def critic_lr(self) -> float:
        if self.train_critic_lr is not None:
            return self.train_critic_lr
        return self.actor_lr

    @property
    def entropy_coef(self) -> float:
        if self.train_entropy_coef is not None:
            return self.train_entropy_coef
        return 0.01 if self.action_kind == "discrete" else 0.0

    @property
    def cluster_map(self) -> tuple[int, ...]:
        if self.regime_kind in ("cluster-shared", "cluster-lora"):
            if not self.regime_cluster_map:
                raise ConfigError("regime.cluster_map is required for cluster regimes")
            return self.regime_cluster_map
        if self.regime_kind in ("ps-id", "mtl", "ps-lora"):
            return tuple(0 for _ in range(self.env_n_agents))
        return tuple(range(self.env_n_agents))  # nps: one cluster per agent

    @property
    def uses_agent_id(self) -> bool:
        """Shared-backbone regimes append a one-hot agent id to observations."""
        return self.regime_kind in ("ps-id", "cluster-shared", "ps-lora", "cluster-lora")

    def out_root(self) -> Path:
        return Path(os.environ.get("LORASA_RUN_ROOT", self.run_out_root))

    def run_dir(self) -> Path:
        return self.out_root() / self.run_name


_KEY_TO_FIELD = {
    "env.id": ("env_id", str),
    "env.n_agents": ("env_n_agents", int),
    "env.grid_size": ("env_grid_size", int),
    "env.episode_limit": ("env_episode_limit", int),
    "learner": ("learner", str),
    "regime.kind": ("regime_kind", str),
    "regime.cluster_map": ("regime_cluster_map", "int_list"),
    "regime.lora_rank": ("regime_lora_rank", "rank"),
    "regime.lora_placement": ("regime_lora_placement", str),
    "arch.hidden_dim": ("arch_hidden_dim", int),
    "train.gamma": ("train_gamma", float),
    "train.gae_lambda": ("train_gae_lambda", float),
    "train.clip": ("train_clip", float),
    "train.epochs": ("train_epochs", int),
    "train.num_minibatch": ("train_num_minibatch", int),
    "train.actor_lr": ("train_actor_lr", float),
    "train.critic_lr": ("train_critic_lr", float),
    "train.entropy_coef": ("train_entropy_coef", float),
    "train.max_grad_norm": ("train_max_grad_norm", float),
    "train.chunk_length": ("train_chunk_length", int),
    "train.rollout_threads": ("train_rollout_threads", int),
    "train.rollout_length": ("train_rollout_length", int),
    "phase.pretrain_steps": ("phase_pretrain_steps", int),
    "phase.milestones": ("phase_milestones", "float_list"),
    "phase.finetune_steps": ("phase_finetune_steps", int),
    "phase.finetune_from": ("phase_finetune_from", float),
    "eval.episodes": ("eval_episodes", int),
    "eval.interval": ("eval_interval", int),
    "eval.seed": ("eval_seed", int),
    "seeds": ("seeds", "int_list"),
    "run.name": ("run_name", str),
    "run.out_root": ("run_out_root", str),
}


def _convert(key: str, value: str, kind) -> object:
    try:
        if kind is str:
            return value
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
        if kind == "int_list":
            return tuple(int(v) for v in value.split(",") if v.strip() != "")
        if kind == "float_list":
            return tuple(float(v) for v in value.split(",") if v.strip() != "")
        if kind == "rank":
            return "full" if value.strip() == "full" else int(value)
    except ValueError as exc:
        raise ConfigError(f"bad value for '{key}': {value!r} ({exc})") from None
    raise ConfigError(f"unhandled kind for '{key}'")


def parse_config_text(text: str) -> RunConfig:
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _KEY_TO_FIELD:
            raise ConfigError(f"line {lineno}: unknown key '{key}'")
        attr, kind = _KEY_TO_FIELD[key]
        setattr(cfg, attr, _convert(key, value, kind))
        cfg.raw_items[key] = value
    validate_config(cfg)
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text())


def validate_config(cfg: RunConfig) -> None:
    if cfg.env_id not in DISCRETE_ENVS + CONTINUOUS_ENVS:
        raise ConfigError(f"env.id must be one of {DISCRETE_ENVS + CONTINUOUS_ENVS}, "
                          f"got {cfg.env_id!r}")
    if cfg.learner not in LEARNERS:
        raise ConfigError(f"learner must be one of {LEARNERS}, got {cfg.learner!r}")
    if cfg.regime_kind not in REGIMES:
        raise ConfigError(f"regime.kind must be one of {REGIMES}, got {cfg.regime_kind!r}")
    if cfg.env_n_agents < 1:
        raise ConfigError("env.n_agents must be >= 1")
    if isinstance(cfg.regime_lora_rank, int) and cfg.regime_lora_rank < 1:
        raise ConfigError("regime.lora_rank must be >= 1 (or 'full')")
    if cfg.regime_kind in ("cluster-shared", "cluster-lora"):
        if len(cfg.regime_cluster_map) != cfg.env_n_agents:
            raise ConfigError("regime.cluster_map must list one cluster per agent")
    if cfg.train_rollout_length % cfg.train_chunk_length != 0:
        raise ConfigError("train.rollout_length must be a multiple of train.chunk_length")
    if cfg.train_num_minibatch < 1:
        raise ConfigError("train.num_minibatch must be >= 1")
    if not cfg.seeds:
        raise ConfigError("seeds must list at least one seed")
    if cfg.eval_episodes < 1:
        raise ConfigError("eval.episodes must be >= 1")
    for frac in cfg.phase_milestones:
        if not 0.0 < frac <= 1.0:
            raise ConfigError("phase.milestones must be fractions in (0, 1]")
    if cfg.regime_kind in LORA_REGIMES and not 0.0 < cfg.phase_finetune_from <= 1.0:
        raise ConfigError("phase.finetune_from must be a fraction in (0, 1]")


def canonical_text(cfg: RunConfig) -> str:
    """Sorted key = value lines for every explicitly set key plus defaults
    the run depends on; stable input for hashing."""
    items = dict(cfg.raw_items)
    # Materialize derived defaults so hashes change when defaults would.
    items.setdefault("train.gae_lambda", repr(cfg.gae_lambda))
    items.setdefault("train.actor_lr", repr(cfg.actor_lr))
    items.setdefault("train.critic_lr", repr(cfg.critic_lr))
    items.setdefault("train.entropy_coef", repr(cfg.entropy_coef))
    return "\n".join(f"{k} = {items[k]}" for k in sorted(items)) + "\n"


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(canonical_text(cfg).encode()).hexdigest()[:16]


def lineage_hash(cfg: RunConfig) -> str:
    lines = []
    for line in canonical_text(cfg).splitlines():
        key, _, value = line.partition(" = ")
        if key in NON_LINEAGE_KEYS:
            continue
        if key == "regime.kind":
            # Phase 1 of a lora regime is exactly its backbone regime, so a
            # fine-tune may start from a checkpoint of either spelling.
            value = {"ps-lora": "ps-id", "cluster-lora": "cluster-shared"}.get(value, value)
            line = f"{key} = {value}"
        lines.append(line)
    return hashlib.sha256(("\n".join(lines) + "\n").encode()).hexdigest()[:16]
