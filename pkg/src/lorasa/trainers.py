"""Rollout collection, GAE, PPO-clip updates, the MAPPO and A2PO learners,
the two-phase pretrain/fine-tune pipeline, and the policy-parameterization
regimes (ps-id, nps, mtl, cluster-shared, ps-lora, cluster-lora).

Everything here is deterministic given (config, seed): env episode seeds and
action draws come from named RNG streams, rollout workers are stepped in
fixed order, and updates never shuffle. The centralized critic reads the
environment's global state and produces one value shared by all agents
(team reward); it keeps training in both phases and is never adapted
per agent.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import lora as lora_mod
from .checkpoint import arrays_checksum, read_checkpoint, write_checkpoint
from .config import RunConfig, config_hash, lineage_hash
from .envs import Env, VecEnv, make_env
from .nn import (
    CONTINUOUS,
    DISCRETE,
    ActionSpec,
    ActorArchitecture,
    ActorParams,
    CriticParams,
    DistParams,
    actor_backward,
    actor_forward,
    append_agent_id,
    critic_backward,
    critic_forward,
    evaluate_logprob_entropy,
    init_actor_params,
    init_critic_params,
    log_softmax,
    sample_squashed,
    softmax,
)
from .numerics import (
    AdamState,
    Array,
    RngStream,
    adam_step,
    clip_grads_by_norm,
)

# RNG stream ids (offset by phase so fine-tuning does not replay pretraining
# episode seeds).
STREAM_INIT_ACTOR = 10
STREAM_INIT_CRITIC = 11
STREAM_INIT_ADAPTER = 12
STREAM_SAMPLE = 20
STREAM_ENV_BASE = 100
PHASE_STREAM_OFFSET = {"pretrain": 0, "finetune": 5000}


class TrainingDiverged(RuntimeError):
    """Raised when a loss turns non-finite; carries diagnostic context."""


@dataclass
class TrainHyper:
    """PPO/GAE hyperparameters; defaults follow the discrete-task settings."""

    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    epochs: int = 5
    num_minibatch: int = 1
    actor_lr: float = 5e-4
    critic_lr: float = 5e-4
    entropy_coef: float = 0.01
    max_grad_norm: float = 10.0
    chunk_length: int = 10
    rollout_threads: int = 8
    rollout_length: int = 100

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "TrainHyper":
        return cls(
            gamma=cfg.train_gamma, gae_lambda=cfg.gae_lambda, clip=cfg.train_clip,
            epochs=cfg.train_epochs, num_minibatch=cfg.train_num_minibatch,
            actor_lr=cfg.actor_lr, critic_lr=cfg.critic_lr,
            entropy_coef=cfg.entropy_coef, max_grad_norm=cfg.train_max_grad_norm,
            chunk_length=cfg.train_chunk_length,
            rollout_threads=cfg.train_rollout_threads,
            rollout_length=cfg.train_rollout_length)


@dataclass
class RegimeSpec:
    """Which parameters exist and who trains on whose data."""

    kind: str
    n_agents: int
    cluster_map: tuple[int, ...]
    lora_rank: int | str = 8
    lora_placement: str = "all"

    def __post_init__(self) -> None:
        if len(self.cluster_map) != self.n_agents:
            raise ValueError("cluster_map must assign every agent")
        if self.kind in ("ps-lora", "cluster-lora") and isinstance(self.lora_rank, int):
            if self.lora_rank < 1:
                raise ValueError("lora rank must be >= 1")

    @property
    def n_clusters(self) -> int:
        return max(self.cluster_map) + 1

    @property
    def is_lora(self) -> bool:
        return self.kind in ("ps-lora", "cluster-lora")

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "RegimeSpec":
        return cls(kind=cfg.regime_kind, n_agents=cfg.env_n_agents,
                   cluster_map=cfg.cluster_map, lora_rank=cfg.regime_lora_rank,
                   lora_placement=cfg.regime_lora_placement)


# ---------------------------------------------------------------------------
# Policy containers
# ---------------------------------------------------------------------------

def actor_step(arch: ActorArchitecture, params: ActorParams, obs: Array, h: Array,
               override: dict[str, Array] | None = None) -> tuple[DistParams, Array]:
    """Single-step actor forward without a trace (rollout/eval hot path)."""
    def w(name: str) -> Array:
        if override is not None and name in override:
            return override[name]
        return params.w[name]

    hid = arch.hidden_dim
    x1 = np.maximum(obs @ w("fc1").T + params.b["fc1"], 0.0)
    x2 = np.maximum(x1 @ w("fc2").T + params.b["fc2"], 0.0)
    gx = x2 @ w("gru_x").T + params.b["gru_x"]
    gh = h @ w("gru_h").T + params.b["gru_h"]
    z = _sig(gx[:, :hid] + gh[:, :hid])
    r = _sig(gx[:, hid:2 * hid] + gh[:, hid:2 * hid])
    n = np.tanh(gx[:, 2 * hid:] + r * gh[:, 2 * hid:])
    h_new = (1.0 - z) * n + z * h
    x3 = np.maximum(h_new @ w("fc_post").T + params.b["fc_post"], 0.0)
    if arch.action.kind == DISCRETE:
        dist = DistParams(DISCRETE, logits=x3 @ w("head").T + params.b["head"])
    else:
        mean = x3 @ w("head").T + params.b["head"]
        log_std = np.clip(x3 @ w("log_std").T + params.b["log_std"], -20.0, 2.0)
        dist = DistParams(CONTINUOUS, mean=mean, log_std=log_std)
    return dist, h_new


def _sig(x: Array) -> Array:
    out = np.tanh(0.5 * x)
    out += 1.0
    out *= 0.5
    return out


@dataclass
class PolicyProvider:
    """Maps agent index to an effective actor; batches where weights allow.

    ``per_agent`` holds one (params, override) pair per agent. When every
    agent resolves to the same params object with no override, a single
    batched forward serves all agents (the shared-backbone fast path).
    """

    arch: ActorArchitecture
    per_agent: list[tuple[ActorParams, dict[str, Array] | None]]

    def act(self, obs_in: Array, h: Array) -> tuple[DistParams, Array]:
        """obs_in: (E, N, input_dim); h: (E, N, H) -> stacked dist, new h."""
        n_env, n_agents, din = obs_in.shape
        first_params = self.per_agent[0][0]
        shared = all(p is first_params and o is None for p, o in self.per_agent)
        if shared:
            dist, h_new = actor_step(self.arch, first_params,
                                     obs_in.reshape(n_env * n_agents, din),
                                     h.reshape(n_env * n_agents, -1))
            return _reshape_dist(dist, n_env, n_agents), h_new.reshape(h.shape)
        dists: list[DistParams] = []
        h_out = np.empty_like(h)
        for i, (params, override) in enumerate(self.per_agent):
            dist, h_new = actor_step(self.arch, params, obs_in[:, i], h[:, i], override)
            dists.append(dist)
            h_out[:, i] = h_new
        return _stack_dists(self.arch.action.kind, dists), h_out


def _reshape_dist(dist: DistParams, n_env: int, n_agents: int) -> DistParams:
    if dist.kind == DISCRETE:
        return DistParams(DISCRETE, logits=dist.logits.reshape(n_env, n_agents, -1))
    return DistParams(CONTINUOUS,
                      mean=dist.mean.reshape(n_env, n_agents, -1),
                      log_std=dist.log_std.reshape(n_env, n_agents, -1))


def _stack_dists(kind: str, dists: list[DistParams]) -> DistParams:
    if kind == DISCRETE:
        return DistParams(DISCRETE, logits=np.stack([d.logits for d in dists], axis=1))
    return DistParams(CONTINUOUS,
                      mean=np.stack([d.mean for d in dists], axis=1),
                      log_std=np.stack([d.log_std for d in dists], axis=1))


class PolicyBank:
    """Regime-aware parameter store: cluster backbones, MTL heads, adapters."""

    def __init__(self, arch: ActorArchitecture, regime: RegimeSpec, phase: str,
                 init_stream: RngStream, adapter_stream: RngStream | None = None,
                 backbones: list[ActorParams] | None = None) -> None:
        self.arch = arch
        self.regime = regime
        self.phase = phase
        n_backbones = 1 if regime.kind == "mtl" else regime.n_clusters
        if backbones is None:
            backbones = [init_actor_params(arch, init_stream) for _ in range(n_backbones)]
        self.backbones = backbones
        self.mtl_heads: list[dict[str, Array]] | None = None
        self.adapters: list[lora_mod.AdapterSet] | None = None
        self._effective: list[dict[str, Array] | None] = [None] * regime.n_agents
        if regime.kind == "mtl":
            # Per-agent copies of the output weight matrices; trunk and all
            # biases stay shared.
            head_layers = [l for l in ("head", "log_std") if l in arch.layer_names]
            self.mtl_heads = [
                {layer: self.backbones[0].w[layer].copy() for layer in head_layers}
                for _ in range(regime.n_agents)]
        if phase == "finetune":
            if not regime.is_lora:
                raise ValueError(f"regime {regime.kind} has no fine-tuning phase")
            if adapter_stream is None:
                raise ValueError("adapter init needs an RNG stream")
            self.adapters = [
                lora_mod.init_adapters(arch, regime.lora_rank, regime.lora_placement,
                                       adapter_stream, agent_id=i)
                for i in range(regime.n_agents)]
            for i in range(regime.n_agents):
                self.refresh_effective(i)

    def cluster_of(self, agent: int) -> int:
        return 0 if self.regime.kind == "mtl" else self.regime.cluster_map[agent]

    def backbone_of(self, agent: int) -> ActorParams:
        return self.backbones[self.cluster_of(agent)]

    def agent_override(self, agent: int) -> dict[str, Array] | None:
        if self.adapters is not None:
            return self._effective[agent]
        if self.mtl_heads is not None:
            return self.mtl_heads[agent]
        return None

    def refresh_effective(self, agent: int) -> None:
        assert self.adapters is not None
        self._effective[agent] = lora_mod.effective_weights(
            self.backbone_of(agent), self.adapters[agent])

    def provider(self) -> PolicyProvider:
        return PolicyProvider(self.arch, [
            (self.backbone_of(i), self.agent_override(i))
            for i in range(self.regime.n_agents)])

    def merged_actor(self, agent: int) -> ActorParams:
        """Standalone per-agent params with any adapters folded in."""
        if self.adapters is not None:
            return lora_mod.merge(self.backbone_of(agent), self.adapters[agent])
        merged = self.backbone_of(agent).copy()
        if self.mtl_heads is not None:
            for layer, w in self.mtl_heads[agent].items():
                merged.w[layer] = w.copy()
        return merged

    def agent_trainable_count(self, agent: int) -> int:
        """Actor-side parameters this agent's update can move (critic excluded)."""
        if self.phase == "finetune":
            assert self.adapters is not None
            return sum(a.size for a in self.adapters[agent].flatten().values())
        count = sum(p.size for p in self.backbone_of(agent).flatten().values())
        if self.mtl_heads is not None:
            # Shared trunk counted once from the backbone; per-agent copies of
            # the head weight matrices replace (not add to) the shared ones.
            return count
        return count

    def backbone_checksum(self) -> str:
        arrays: dict[str, Array] = {}
        for c, backbone in enumerate(self.backbones):
            for name, arr in backbone.flatten().items():
                arrays[f"backbone{c}.{name}"] = arr
        return arrays_checksum(arrays)


# ---------------------------------------------------------------------------
# Rollouts
# ---------------------------------------------------------------------------

@dataclass
class RolloutBatch:
    """Time-major trajectories; agent axis kept so per-agent slices are views."""

    obs: Array          # (T, E, N, input_dim), agent ids already appended
    actions: Array      # (T, E, N) int64 or (T, E, N, A) float64
    pre_squash: Array | None  # (T, E, N, A) for continuous actions
    logp: Array         # (T, E, N) behavior log-probs at sampling time
    rewards: Array      # (T, E) shared team reward
    values: Array       # (T, E) critic values at sampling time
    dones: Array        # (T, E) episode ended after this step
    starts: Array       # (T, E) episode began at this step (hidden was zeroed)
    h_pre: Array        # (T, E, N, H) hidden fed into the step
    states: Array       # (T, E, S) global states
    bootstrap: Array    # (E,) value of the state after the last step

    @property
    def t_len(self) -> int:
        return self.obs.shape[0]

    @property
    def n_env(self) -> int:
        return self.obs.shape[1]

    @property
    def n_agents(self) -> int:
        return self.obs.shape[2]


@dataclass
class RolloutState:
    """Mutable collection context owned by a trainer."""

    vec: VecEnv
    obs: Array       # (E, N, obs_dim) raw (no ids)
    state: Array     # (E, S)
    h: Array         # (E, N, H)
    fresh: Array     # (E,) episode begins at the next step


def _append_ids(obs: Array, id_dim: int) -> Array:
    if id_dim == 0:
        return obs
    n_env, n_agents, _ = obs.shape
    eye = np.eye(id_dim)[:n_agents]
    ids = np.broadcast_to(eye, (n_env, n_agents, id_dim))
    return np.concatenate([obs, ids], axis=-1)


def collect_rollouts(provider: PolicyProvider, rstate: RolloutState, t_len: int,
                     sample_stream: RngStream, critic: CriticParams,
                     id_dim: int) -> RolloutBatch:
    """Gather ``t_len`` steps from every worker under a frozen policy snapshot.

    Recurrent state carries across steps and resets at episode boundaries;
    behavior log-probs are recorded at sampling time.
    """
    n_env, n_agents, _ = rstate.obs.shape
    hidden = rstate.h.shape[-1]
    arch = provider.arch
    kind = arch.action.kind
    din = arch.input_dim

    obs_buf = np.empty((t_len, n_env, n_agents, din))
    if kind == DISCRETE:
        act_buf = np.empty((t_len, n_env, n_agents), dtype=np.int64)
        u_buf = None
    else:
        act_buf = np.empty((t_len, n_env, n_agents, arch.action.n))
        u_buf = np.empty_like(act_buf)
    logp_buf = np.empty((t_len, n_env, n_agents))
    rew_buf = np.empty((t_len, n_env))
    val_buf = np.empty((t_len, n_env))
    done_buf = np.zeros((t_len, n_env), dtype=bool)
    start_buf = np.zeros((t_len, n_env), dtype=bool)
    h_buf = np.empty((t_len, n_env, n_agents, hidden))
    state_buf = np.empty((t_len, n_env) + rstate.state.shape[1:])

    for t in range(t_len):
        obs_in = _append_ids(rstate.obs, id_dim)
        obs_buf[t] = obs_in
        h_buf[t] = rstate.h
        start_buf[t] = rstate.fresh
        state_buf[t] = rstate.state
        dist, h_new = provider.act(obs_in, rstate.h)
        if kind == DISCRETE:
            logits = dist.logits.reshape(n_env * n_agents, -1)
            logp_all = log_softmax(logits)
            draw = sample_stream.random((n_env * n_agents, 1))
            cum = np.cumsum(np.exp(logp_all), axis=-1)
            acts = np.minimum((draw >= cum).sum(axis=-1), logits.shape[-1] - 1)
            logp = np.take_along_axis(logp_all, acts[:, None], axis=-1)[:, 0]
            act_buf[t] = acts.reshape(n_env, n_agents)
            logp_buf[t] = logp.reshape(n_env, n_agents)
            env_actions = act_buf[t]
        else:
            flat = DistParams(CONTINUOUS,
                              mean=dist.mean.reshape(n_env * n_agents, -1),
                              log_std=dist.log_std.reshape(n_env * n_agents, -1))
            a, u, logp = sample_squashed(flat, sample_stream)
            act_buf[t] = a.reshape(n_env, n_agents, -1)
            u_buf[t] = u.reshape(n_env, n_agents, -1)
            logp_buf[t] = logp.reshape(n_env, n_agents)
            env_actions = act_buf[t]
        val_buf[t], _ = critic_forward(critic, rstate.state)
        next_obs, next_state, rewards, dones = rstate.vec.step(env_actions)
        rew_buf[t] = rewards
        done_buf[t] = dones
        h_new[dones] = 0.0
        rstate.obs, rstate.state, rstate.h, rstate.fresh = next_obs, next_state, h_new, dones

    bootstrap, _ = critic_forward(critic, rstate.state)
    return RolloutBatch(obs=obs_buf, actions=act_buf, pre_squash=u_buf,
                        logp=logp_buf, rewards=rew_buf, values=val_buf,
                        dones=done_buf, starts=start_buf, h_pre=h_buf,
                        states=state_buf, bootstrap=bootstrap)


# ---------------------------------------------------------------------------
# GAE and the PPO objective
# ---------------------------------------------------------------------------

def compute_gae(rewards: Array, values: Array, dones: Array, bootstrap: Array,
                gamma: float, lam: float) -> tuple[Array, Array]:
    """Generalized advantage estimation over (T, E) arrays.

    delta_t = r_t + gamma * v_{t+1} * (1 - done_t) - v_t
    A_t = delta_t + gamma * lam * (1 - done_t) * A_{t+1}; returns = A + v.
    Advantages come back unnormalized; normalization happens per update.
    """
    if not (rewards.shape == values.shape == dones.shape):
        raise ValueError("rewards/values/dones must share a (T, E) shape")
    t_len = rewards.shape[0]
    adv = np.zeros_like(rewards)
    last = np.zeros_like(bootstrap, dtype=np.float64)
    for t in range(t_len - 1, -1, -1):
        next_v = bootstrap if t == t_len - 1 else values[t + 1]
        nonterm = 1.0 - dones[t].astype(np.float64)
        delta = rewards[t] + gamma * next_v * nonterm - values[t]
        last = delta + gamma * lam * nonterm * last
        adv[t] = last
    return adv, adv + values


@dataclass
class PpoStats:
    policy_loss: float
    entropy: float


def ppo_surrogate(new_logp: Array, old_logp: Array, adv: Array,
                  clip: float) -> tuple[float, Array]:
    """Clipped objective and its gradient with respect to new_logp.

    Returns (loss, dloss/dnew_logp) where loss = -mean(min(r A, clip(r) A)).
    Gradient flows through the unclipped branch exactly where the min picks
    it (ties included), the standard subgradient choice.
    """
    ratio = np.exp(new_logp - old_logp)
    surr1 = ratio * adv
    surr2 = np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv
    loss = -float(np.mean(np.minimum(surr1, surr2)))
    active = (surr1 <= surr2).astype(np.float64)
    dlogp = -(adv * ratio * active) / new_logp.size
    return loss, dlogp


def actor_loss_and_upstream(dist: DistParams, actions: Array, pre_squash: Array | None,
                            old_logp: Array, adv: Array, hyper: TrainHyper,
                            ) -> tuple[PpoStats, dict[str, Array]]:
    """PPO-clip + entropy-bonus loss and upstream gradients on dist params."""
    if dist.kind == DISCRETE:
        logits = dist.logits
        logp_all = log_softmax(logits)
        probs = np.exp(logp_all)
        new_logp = np.take_along_axis(logp_all, actions[..., None], axis=-1)[..., 0]
        entropy = -(probs * logp_all).sum(axis=-1)
        loss, dlogp = ppo_surrogate(new_logp, old_logp, adv, hyper.clip)
        onehot = np.zeros_like(probs)
        np.put_along_axis(onehot, actions[..., None], 1.0, axis=-1)
        dlogits = dlogp[..., None] * (onehot - probs)
        if hyper.entropy_coef != 0.0:
            # loss -= coef * mean(H); dH/dlogit_k = -p_k (log p_k + H)
            dlogits += (hyper.entropy_coef / entropy.size) * probs \
                * (logp_all + entropy[..., None])
        stats = PpoStats(policy_loss=loss, entropy=float(entropy.mean()))
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite policy loss {loss}")
        return stats, {"logits": dlogits}
    mean, log_std = dist.mean, dist.log_std
    u = pre_squash
    var = np.exp(2.0 * log_std)
    a = np.tanh(u)
    gauss = (-0.5 * (u - mean) ** 2 / var - log_std - 0.5 * np.log(2 * np.pi))
    new_logp = gauss.sum(axis=-1) - np.log(1.0 - a * a + 1e-6).sum(axis=-1)
    entropy = (log_std + 0.5 * np.log(2 * np.pi * np.e)).sum(axis=-1)
    loss, dlogp = ppo_surrogate(new_logp, old_logp, adv, hyper.clip)
    dmean = dlogp[..., None] * (u - mean) / var
    dlog_std = dlogp[..., None] * ((u - mean) ** 2 / var - 1.0)
    if hyper.entropy_coef != 0.0:
        dlog_std -= hyper.entropy_coef / entropy.size
    stats = PpoStats(policy_loss=loss, entropy=float(entropy.mean()))
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite policy loss {loss}")
    return stats, {"mean": dmean, "log_std": dlog_std}


# ---------------------------------------------------------------------------
# Chunk reshaping helpers
# ---------------------------------------------------------------------------

def _chunked(arr: Array, chunk: int) -> Array:
    """(T, B, ...) -> (chunk, T//chunk * B, ...) preserving (chunk, batch) order."""
    t_len, batch = arr.shape[0], arr.shape[1]
    n_chunks = t_len // chunk
    rest = arr.shape[2:]
    out = arr.reshape((n_chunks, chunk, batch) + rest).swapaxes(0, 1)
    return np.ascontiguousarray(out.reshape((chunk, n_chunks * batch) + rest))


def _chunk_h0(h_pre: Array, chunk: int) -> Array:
    """Stored hidden states at chunk starts: (T, B, H) -> (T//chunk * B, H)."""
    return np.ascontiguousarray(h_pre[::chunk].reshape(-1, h_pre.shape[-1]))


@dataclass
class AgentSlice:
    """One update group's sequences, already chunked for BPTT."""

    obs: Array          # (L, Bc, D)
    h0: Array           # (Bc, H)
    mask: Array         # (L, Bc) 1 - episode-start flags
    actions: Array
    pre_squash: Array | None
    old_logp: Array     # (L, Bc)
    adv: Array          # (L, Bc)
    count: int

    def cols(self, s: slice) -> "AgentSlice":
        return AgentSlice(
            obs=self.obs[:, s], h0=self.h0[s], mask=self.mask[:, s],
            actions=self.actions[:, s],
            pre_squash=None if self.pre_squash is None else self.pre_squash[:, s],
            old_logp=self.old_logp[:, s], adv=self.adv[:, s],
            count=self.old_logp[:, s].size)


def make_slice(batch: RolloutBatch, adv_norm: Array, agents: Sequence[int],
               chunk: int) -> AgentSlice:
    """Pool the named agents' sequences into one chunked update batch."""
    obs = np.concatenate([batch.obs[:, :, i] for i in agents], axis=1)
    h_pre = np.concatenate([batch.h_pre[:, :, i] for i in agents], axis=1)
    if batch.actions.ndim == 3:
        actions = np.concatenate([batch.actions[:, :, i] for i in agents], axis=1)
        pre_squash = None
    else:
        actions = np.concatenate([batch.actions[:, :, i] for i in agents], axis=1)
        pre_squash = np.concatenate([batch.pre_squash[:, :, i] for i in agents], axis=1)
    old_logp = np.concatenate([batch.logp[:, :, i] for i in agents], axis=1)
    starts = np.concatenate([batch.starts] * len(agents), axis=1)
    adv = np.concatenate([adv_norm] * len(agents), axis=1)
    return AgentSlice(
        obs=_chunked(obs, chunk),
        h0=_chunk_h0(h_pre, chunk),
        mask=1.0 - _chunked(starts.astype(np.float64), chunk),
        actions=_chunked(actions, chunk),
        pre_squash=None if pre_squash is None else _chunked(pre_squash, chunk),
        old_logp=_chunked(old_logp, chunk),
        adv=_chunked(adv, chunk),
        count=old_logp.size)


def _minibatch_cols(total: int, num: int) -> list[slice]:
    if total % num != 0:
        raise ValueError(f"num_minibatch {num} must divide batch width {total}")
    width = total // num
    return [slice(k * width, (k + 1) * width) for k in range(num)]


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------

@dataclass
class IterationStats:
    policy_loss: float
    value_loss: float
    entropy: float
    grad_norm: float


class Trainer:
    """One training phase of one (config, seed) pair.

    Owns the policy bank, critic, optimizer states, environments, RNG
    streams, and counters; every piece of that state round-trips through
    :meth:`state_arrays` / :meth:`load_state` so a reloaded checkpoint
    continues bit-identically.
    """

    def __init__(self, cfg: RunConfig, seed: int, phase: str = "pretrain",
                 regime: RegimeSpec | None = None) -> None:
        self.cfg = cfg
        self.seed = seed
        self.phase = phase
        self.hyper = TrainHyper.from_config(cfg)
        self.regime = regime or RegimeSpec.from_config(cfg)
        offset = PHASE_STREAM_OFFSET[phase]

        env_kwargs: dict = {"n_agents": cfg.env_n_agents}
        if cfg.env_id.endswith("grid"):
            env_kwargs["size"] = cfg.env_grid_size
        if cfg.env_episode_limit:
            env_kwargs["episode_limit"] = cfg.env_episode_limit
        self._env_kwargs = env_kwargs
        proto = make_env(cfg.env_id, **env_kwargs)
        self.n_agents = proto.n_agents
        id_dim = self.n_agents if cfg.uses_agent_id else 0
        self.arch = ActorArchitecture(
            obs_dim=proto.obs_dim,
            action=ActionSpec(proto.action_kind, proto.action_dim),
            id_dim=id_dim, hidden_dim=cfg.arch_hidden_dim)

        init_stream = RngStream(seed, STREAM_INIT_ACTOR)
        critic_stream = RngStream(seed, STREAM_INIT_CRITIC)
        adapter_stream = RngStream(seed, STREAM_INIT_ADAPTER)
        self.bank = PolicyBank(self.arch, self.regime, phase, init_stream,
                               adapter_stream)
        self.critic = init_critic_params(proto.state_dim, cfg.arch_hidden_dim,
                                         critic_stream)
        self.sample_stream = RngStream(seed, STREAM_SAMPLE + offset)

        n_env = self.hyper.rollout_threads
        envs = [make_env(cfg.env_id, **env_kwargs) for _ in range(n_env)]
        streams = [RngStream(seed, STREAM_ENV_BASE + offset + w) for w in range(n_env)]
        vec = VecEnv(envs, streams)
        obs, state = vec.reset_all()
        self.rollout = RolloutState(
            vec=vec, obs=obs, state=state,
            h=np.zeros((n_env, self.n_agents, cfg.arch_hidden_dim)),
            fresh=np.ones(n_env, dtype=bool))

        self._init_optimizers()
        self.env_steps = 0
        self.iteration_index = 0
        self._train_episodes: list[tuple[float, int, bool]] = []

    # -- optimizers -------------------------------------------------------

    def _init_optimizers(self) -> None:
        h = self.hyper
        self.critic_adam = AdamState.for_params(self.critic.flatten(), h.critic_lr)
        self.actor_adams: dict[str, AdamState] = {}
        if self.phase == "finetune":
            assert self.bank.adapters is not None
            for i, aset in enumerate(self.bank.adapters):
                self.actor_adams[f"adapters{i}"] = AdamState.for_params(
                    aset.flatten(), h.actor_lr)
        elif self.regime.kind == "mtl":
            self.actor_adams["mtl"] = AdamState.for_params(self._mtl_params(), h.actor_lr)
        else:
            for c, backbone in enumerate(self.bank.backbones):
                self.actor_adams[f"backbone{c}"] = AdamState.for_params(
                    backbone.flatten(), h.actor_lr)

    def _mtl_params(self) -> dict[str, Array]:
        """Shared trunk + shared biases + per-agent head weight copies."""
        assert self.bank.mtl_heads is not None
        trunk = self.bank.backbones[0]
        head_layers = set(self.bank.mtl_heads[0])
        params = {f"w.{k}": v for k, v in trunk.w.items() if k not in head_layers}
        params.update({f"b.{k}": v for k, v in trunk.b.items()})
        for i, heads in enumerate(self.bank.mtl_heads):
            for layer, w in heads.items():
                params[f"agent{i}.w.{layer}"] = w
        return params

    def _write_mtl_params(self, params: dict[str, Array]) -> None:
        assert self.bank.mtl_heads is not None
        trunk = self.bank.backbones[0]
        head_layers = set(self.bank.mtl_heads[0])
        for k, v in params.items():
            if k.startswith("agent"):
                idx, _, rest = k.partition(".")
                layer = rest[2:]
                self.bank.mtl_heads[int(idx[5:])][layer] = v
            elif k.startswith("w."):
                if k[2:] not in head_layers:
                    trunk.w[k[2:]] = v
            else:
                trunk.b[k[2:]] = v

    # -- one iteration ------------------------------------------------------

    def run_iteration(self) -> IterationStats:
        batch = collect_rollouts(self.bank.provider(), self.rollout,
                                 self.hyper.rollout_length, self.sample_stream,
                                 self.critic, self.arch.id_dim)
        self.env_steps += batch.t_len * batch.n_env
        self.iteration_index += 1
        self._train_episodes.extend(self.rollout.vec.drain_completed())

        adv, returns = compute_gae(batch.rewards, batch.values, batch.dones,
                                   batch.bootstrap, self.hyper.gamma,
                                   self.hyper.gae_lambda)
        adv_norm = (adv - adv.mean()) / (adv.std() + 1e-8)

        if self.cfg.learner == "mappo":
            stats = self.mappo_iteration(batch, adv_norm, returns)
        else:
            stats = self.a2po_iteration(batch, adv_norm, returns)
        return stats

    def mappo_iteration(self, batch: RolloutBatch, adv_norm: Array,
                        returns: Array) -> IterationStats:
        """Simultaneous actor updates (shared regimes pool agents' data),
        then one pooled critic update."""
        groups = self._mappo_groups()
        astats = [self._update_actor_group(batch, adv_norm, kind, target, agents)
                  for kind, target, agents in groups]
        vloss = self._update_critic(batch, returns)
        return _merge_stats(astats, vloss)

    def a2po_iteration(self, batch: RolloutBatch, adv_norm: Array, returns: Array,
                       order: Sequence[int] | None = None) -> IterationStats:
        """Sequential per-agent updates in ascending index order; ratios use
        the stored behavior log-probs; advantages were computed once before
        the loop; the critic updates after all agents."""
        agents = list(order) if order is not None else list(range(self.n_agents))
        astats = []
        for i in agents:
            if self.phase == "finetune":
                kind, target = "adapters", i
            elif self.regime.kind == "mtl":
                kind, target = "mtl", 0
            else:
                kind, target = "backbone", self.bank.cluster_of(i)
            astats.append(self._update_actor_group(batch, adv_norm, kind, target, (i,)))
        vloss = self._update_critic(batch, returns)
        return _merge_stats(astats, vloss)

    def _mappo_groups(self) -> list[tuple[str, int, tuple[int, ...]]]:
        if self.phase == "finetune":
            return [("adapters", i, (i,)) for i in range(self.n_agents)]
        kind = self.regime.kind
        if kind == "mtl":
            return [("mtl", 0, tuple(range(self.n_agents)))]
        clusters: dict[int, list[int]] = {}
        for i in range(self.n_agents):
            clusters.setdefault(self.bank.cluster_of(i), []).append(i)
        return [("backbone", c, tuple(members)) for c, members in sorted(clusters.items())]

    # -- actor update -------------------------------------------------------

    def _update_actor_group(self, batch: RolloutBatch, adv_norm: Array, kind: str,
                            target: int, agents: tuple[int, ...]) -> IterationStats:
        hyper = self.hyper
        losses, entropies, norms = [], [], []
        full = None if kind == "mtl" else make_slice(batch, adv_norm, agents,
                                                     hyper.chunk_length)
        mtl_slices = None
        if kind == "mtl":
            mtl_slices = {i: make_slice(batch, adv_norm, (i,), hyper.chunk_length)
                          for i in agents}
            width = next(iter(mtl_slices.values())).h0.shape[0]
        else:
            width = full.h0.shape[0]
        for _ in range(hyper.epochs):
            for mb in _minibatch_cols(width, hyper.num_minibatch):
                if kind == "mtl":
                    grads, stats = self._mtl_grads(
                        {i: sl.cols(mb) for i, sl in mtl_slices.items()})
                    params = self._mtl_params()
                    grads, norm = clip_grads_by_norm(grads, hyper.max_grad_norm)
                    new_params, self.actor_adams["mtl"] = adam_step(
                        params, grads, self.actor_adams["mtl"])
                    self._write_mtl_params(new_params)
                elif kind == "adapters":
                    agent = agents[0]
                    sl = full.cols(mb)
                    stats, wgrads = self._actor_grads(sl, self.bank.backbone_of(agent),
                                                      self.bank.agent_override(agent))
                    aset = self.bank.adapters[agent]
                    eff_grads = {l: wgrads[f"w.{l}"] for l in aset.placement}
                    grads = lora_mod.adapter_gradients(aset, eff_grads)
                    grads, norm = clip_grads_by_norm(grads, hyper.max_grad_norm)
                    key = f"adapters{agent}"
                    new_factors, self.actor_adams[key] = adam_step(
                        aset.flatten(), grads, self.actor_adams[key])
                    aset.load_flat(new_factors)
                    self.bank.refresh_effective(agent)
                else:
                    sl = full.cols(mb)
                    backbone = self.bank.backbones[target]
                    stats, grads = self._actor_grads(sl, backbone, None)
                    grads, norm = clip_grads_by_norm(grads, hyper.max_grad_norm)
                    key = f"backbone{target}"
                    new_params, self.actor_adams[key] = adam_step(
                        backbone.flatten(), grads, self.actor_adams[key])
                    self.bank.backbones[target] = ActorParams.from_flat(new_params)
                losses.append(stats.policy_loss)
                entropies.append(stats.entropy)
                norms.append(norm)
        return IterationStats(policy_loss=float(np.mean(losses)), value_loss=0.0,
                              entropy=float(np.mean(entropies)),
                              grad_norm=float(np.mean(norms)))

    def _actor_grads(self, sl: AgentSlice, params: ActorParams,
                     override: dict[str, Array] | None,
                     ) -> tuple[PpoStats, dict[str, Array]]:
        """Recompute log-probs through chunked BPTT and backprop the PPO loss."""
        dist, _, trace = actor_forward(self.arch, params, sl.obs, sl.h0,
                                       override=override, reset_mask=sl.mask)
        stats, upstream = actor_loss_and_upstream(dist, sl.actions, sl.pre_squash,
                                                  sl.old_logp, sl.adv, self.hyper)
        grads = actor_backward(self.arch, params, trace, upstream, override=override)
        return stats, grads

    def _mtl_grads(self, slices: dict[int, AgentSlice],
                   ) -> tuple[dict[str, Array], PpoStats]:
        """Pooled loss over agents; trunk grads sum, head grads stay per agent."""
        assert self.bank.mtl_heads is not None
        head_layers = set(self.bank.mtl_heads[0])
        trunk = self.bank.backbones[0]
        total: dict[str, Array] = {}
        losses, ents = [], []
        scale = 1.0 / len(slices)  # pooled mean = mean of per-agent means (equal counts)
        for i, sl in slices.items():
            stats, grads = self._actor_grads(sl, trunk, self.bank.mtl_heads[i])
            losses.append(stats.policy_loss)
            ents.append(stats.entropy)
            for k, g in grads.items():
                layer = k[2:]
                if k.startswith("w.") and layer in head_layers:
                    total[f"agent{i}.w.{layer}"] = g * scale
                else:
                    total[k] = total.get(k, 0.0) + g * scale
        # Adam expects every tracked name; absent heads (other agents in a2po
        # sequential mode) get zero grads so their moments just decay.
        for name, arr in self._mtl_params().items():
            if name not in total:
                total[name] = np.zeros_like(arr)
        return total, PpoStats(policy_loss=float(np.mean(losses)),
                               entropy=float(np.mean(ents)))

    # -- critic update ------------------------------------------------------

    def _update_critic(self, batch: RolloutBatch, returns: Array) -> float:
        hyper = self.hyper
        states = batch.states.reshape(-1, batch.states.shape[-1])
        target = returns.reshape(-1)
        cols = _minibatch_cols(states.shape[0], hyper.num_minibatch)
        losses = []
        for _ in range(hyper.epochs):
            for mb in cols:
                values, trace = critic_forward(self.critic, states[mb])
                err = values - target[mb]
                loss = float(np.mean(err * err))
                if not np.isfinite(loss):
                    raise TrainingDiverged(f"non-finite value loss {loss}")
                grads = critic_backward(self.critic, trace, 2.0 * err / err.size)
                grads, _ = clip_grads_by_norm(grads, hyper.max_grad_norm)
                new_params, self.critic_adam = adam_step(self.critic.flatten(), grads,
                                                         self.critic_adam)
                self.critic = CriticParams(
                    w={k[2:]: v for k, v in new_params.items() if k.startswith("w.")},
                    b={k[2:]: v for k, v in new_params.items() if k.startswith("b.")})
                losses.append(loss)
        return float(np.mean(losses))

    # -- bookkeeping ---------------------------------------------------------

    def drain_train_episodes(self) -> list[tuple[float, int, bool]]:
        out, self._train_episodes = self._train_episodes, []
        return out

    def evaluate_now(self, n_episodes: int | None = None,
                     seed: int | None = None) -> dict[str, float]:
        return evaluate(self.bank.provider(),
                        lambda: make_env(self.cfg.env_id, **self._env_kwargs),
                        self.cfg.eval_episodes if n_episodes is None else n_episodes,
                        self.cfg.eval_seed if seed is None else seed,
                        id_dim=self.arch.id_dim,
                        hidden_dim=self.arch.hidden_dim)

    # -- checkpoint state -----------------------------------------------------

    def state_arrays(self) -> tuple[dict[str, Array], dict]:
        arrays: dict[str, Array] = {}
        for c, backbone in enumerate(self.bank.backbones):
            for name, arr in backbone.flatten().items():
                arrays[f"backbone{c}.{name}"] = arr
        for name, arr in self.critic.flatten().items():
            arrays[f"critic.{name}"] = arr
        if self.bank.mtl_heads is not None:
            for i, heads in enumerate(self.bank.mtl_heads):
                for layer, w in heads.items():
                    arrays[f"mtl_head{i}.{layer}"] = w
        if self.bank.adapters is not None:
            for i, aset in enumerate(self.bank.adapters):
                for name, arr in aset.flatten().items():
                    arrays[f"adapters{i}.{name}"] = arr
        adam_meta: dict[str, dict] = {}
        for key, state in {**self.actor_adams, "critic": self.critic_adam}.items():
            adam_meta[key] = {"step": state.step, "lr": state.lr,
                              "beta1": state.beta1, "beta2": state.beta2,
                              "eps": state.eps}
            for name, arr in state.m.items():
                arrays[f"adam.{key}.m.{name}"] = arr
            for name, arr in state.v.items():
                arrays[f"adam.{key}.v.{name}"] = arr
        vec_state = self.rollout.vec.get_state()
        env_meta = []
        for w, env_snap in enumerate(vec_state["envs"]):
            scalars = {}
            for k, v in env_snap.items():
                if isinstance(v, np.ndarray):
                    arrays[f"env{w}.{k}"] = v
                else:
                    scalars[k] = v
            env_meta.append(scalars)
        arrays["rollout.h"] = self.rollout.h
        arrays["rollout.fresh"] = self.rollout.fresh
        arrays["rollout.ep_return"] = vec_state["ep_return"]
        arrays["rollout.ep_len"] = vec_state["ep_len"]
        meta = {
            "phase": self.phase,
            "seed": self.seed,
            "env_steps": self.env_steps,
            "iteration": self.iteration_index,
            "config_hash": config_hash(self.cfg),
            "lineage_hash": lineage_hash(self.cfg),
            "regime": self.regime.kind,
            "n_agents": self.n_agents,
            "env": {"id": self.cfg.env_id, **{k: v for k, v in self._env_kwargs.items()}},
            "arch": {"obs_dim": self.arch.obs_dim, "id_dim": self.arch.id_dim,
                     "hidden_dim": self.arch.hidden_dim,
                     "action_kind": self.arch.action.kind, "action_n": self.arch.action.n},
            "adam": adam_meta,
            "env_scalars": env_meta,
            "streams": {"sample": self.sample_stream.get_state(),
                        "env": vec_state["streams"]},
        }
        return arrays, meta

    def load_state(self, arrays: dict[str, Array], meta: dict) -> None:
        for c in range(len(self.bank.backbones)):
            flat = {name[len(f"backbone{c}."):]: arr.copy()
                    for name, arr in arrays.items() if name.startswith(f"backbone{c}.")}
            self.bank.backbones[c] = ActorParams.from_flat(flat)
        cflat = {name[7:]: arr.copy() for name, arr in arrays.items()
                 if name.startswith("critic.")}
        self.critic = CriticParams(
            w={k[2:]: v for k, v in cflat.items() if k.startswith("w.")},
            b={k[2:]: v for k, v in cflat.items() if k.startswith("b.")})
        if self.bank.mtl_heads is not None:
            for i in range(self.n_agents):
                for layer in self.bank.mtl_heads[i]:
                    self.bank.mtl_heads[i][layer] = arrays[f"mtl_head{i}.{layer}"].copy()
        if self.bank.adapters is not None:
            for i, aset in enumerate(self.bank.adapters):
                flat = {name[len(f"adapters{i}."):]: arr.copy()
                        for name, arr in arrays.items()
                        if name.startswith(f"adapters{i}.")}
                aset.load_flat(flat)
                self.bank.refresh_effective(i)
        for key, scal in meta["adam"].items():
            m = {name[len(f"adam.{key}.m."):]: arr.copy() for name, arr in arrays.items()
                 if name.startswith(f"adam.{key}.m.")}
            v = {name[len(f"adam.{key}.v."):]: arr.copy() for name, arr in arrays.items()
                 if name.startswith(f"adam.{key}.v.")}
            state = AdamState(lr=scal["lr"], beta1=scal["beta1"], beta2=scal["beta2"],
                              eps=scal["eps"], step=scal["step"], m=m, v=v)
            if key == "critic":
                self.critic_adam = state
            else:
                self.actor_adams[key] = state
        env_states = []
        for w, scalars in enumerate(meta["env_scalars"]):
            snap = dict(scalars)
            prefix = f"env{w}."
            for name, arr in arrays.items():
                if name.startswith(prefix):
                    snap[name[len(prefix):]] = arr
            env_states.append(snap)
        self.rollout.vec.set_state({
            "envs": env_states,
            "streams": meta["streams"]["env"],
            "ep_return": arrays["rollout.ep_return"],
            "ep_len": arrays["rollout.ep_len"],
        })
        self.sample_stream.set_state(meta["streams"]["sample"])
        self.rollout.h = arrays["rollout.h"].copy()
        self.rollout.fresh = arrays["rollout.fresh"].astype(bool).copy()
        self.rollout.obs, self.rollout.state = self.rollout.vec.current_obs_state()
        self.env_steps = int(meta["env_steps"])
        self.iteration_index = int(meta["iteration"])

    def load_pretrained(self, arrays: dict[str, Array], meta: dict) -> None:
        """Adopt backbone, critic, and critic optimizer from a pretraining
        checkpoint; everything phase-2-local (adapters, streams, envs) stays
        freshly initialized."""
        arch_meta = meta["arch"]
        if (arch_meta["obs_dim"], arch_meta["id_dim"], arch_meta["hidden_dim"]) != \
                (self.arch.obs_dim, self.arch.id_dim, self.arch.hidden_dim):
            raise ValueError("checkpoint architecture does not match config")
        for c in range(len(self.bank.backbones)):
            flat = {name[len(f"backbone{c}."):]: arr.copy()
                    for name, arr in arrays.items() if name.startswith(f"backbone{c}.")}
            if not flat:
                raise ValueError(f"checkpoint lacks backbone {c}")
            self.bank.backbones[c] = ActorParams.from_flat(flat)
        cflat = {name[7:]: arr.copy() for name, arr in arrays.items()
                 if name.startswith("critic.")}
        self.critic = CriticParams(
            w={k[2:]: v for k, v in cflat.items() if k.startswith("w.")},
            b={k[2:]: v for k, v in cflat.items() if k.startswith("b.")})
        scal = meta["adam"]["critic"]
        self.critic_adam = AdamState(
            lr=scal["lr"], beta1=scal["beta1"], beta2=scal["beta2"], eps=scal["eps"],
            step=scal["step"],
            m={n[len("adam.critic.m."):]: a.copy() for n, a in arrays.items()
               if n.startswith("adam.critic.m.")},
            v={n[len("adam.critic.v."):]: a.copy() for n, a in arrays.items()
               if n.startswith("adam.critic.v.")})
        if self.bank.adapters is not None:
            for i in range(self.n_agents):
                self.bank.refresh_effective(i)


def _merge_stats(actor_stats: list[IterationStats], value_loss: float) -> IterationStats:
    return IterationStats(
        policy_loss=float(np.mean([s.policy_loss for s in actor_stats])),
        value_loss=value_loss,
        entropy=float(np.mean([s.entropy for s in actor_stats])),
        grad_norm=float(np.mean([s.grad_norm for s in actor_stats])))


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def evaluate(provider: PolicyProvider, env_factory: Callable[[], Env],
             n_episodes: int, seed: int, id_dim: int, hidden_dim: int,
             mode: str = "deterministic", max_parallel: int = 32,
             rng: RngStream | None = None) -> dict[str, float]:
    """Run fixed-seed evaluation episodes and aggregate metrics.

    Episode seeds derive from a dedicated stream keyed by ``seed`` (disjoint
    from training episode streams); actions are deterministic by default, so
    evaluating the same policy twice yields identical metrics.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    seed_stream = RngStream(seed, stream_id=999)
    episode_seeds = [seed_stream.next_seed() for _ in range(n_episodes)]
    n_par = min(n_episodes, max_parallel)
    envs = [env_factory() for _ in range(n_par)]
    n_agents = envs[0].n_agents
    returns = np.zeros(n_episodes)
    lengths = np.zeros(n_episodes, dtype=np.int64)
    successes = np.zeros(n_episodes, dtype=bool)

    for wave_start in range(0, n_episodes, n_par):
        wave = list(range(wave_start, min(wave_start + n_par, n_episodes)))
        obs = np.zeros((len(wave), n_agents, envs[0].obs_dim))
        for j, ep in enumerate(wave):
            o, _ = envs[j].reset(episode_seeds[ep])
            obs[j] = o
        h = np.zeros((len(wave), n_agents, hidden_dim))
        active = np.ones(len(wave), dtype=bool)
        while active.any():
            obs_in = _append_ids(obs, id_dim)
            dist, h_new = provider.act(obs_in, h)
            if dist.kind == DISCRETE:
                actions = np.argmax(dist.logits, axis=-1)
                if mode == "stochastic":
                    flat = dist.logits.reshape(-1, dist.logits.shape[-1])
                    draw = rng.random((flat.shape[0], 1))
                    cum = np.cumsum(softmax(flat), axis=-1)
                    actions = np.minimum((draw >= cum).sum(axis=-1),
                                         flat.shape[-1] - 1).reshape(actions.shape)
            else:
                if mode == "stochastic":
                    std = np.exp(dist.log_std)
                    u = dist.mean + std * rng.normal(dist.mean.shape)
                else:
                    u = dist.mean
                actions = np.tanh(u)
            h = h_new
            for j in np.flatnonzero(active):
                o, _, r, done, info = envs[j].step(actions[j])
                ep = wave[j]
                returns[ep] += r
                lengths[ep] += 1
                obs[j] = o
                if done:
                    successes[ep] = bool(info.get("success", False))
                    active[j] = False
    return {
        "mean_return": float(returns.mean()),
        "median_return": float(np.median(returns)),
        "success_rate": float(successes.mean()),
        "mean_length": float(lengths.mean()),
    }


def merged_provider(arch: ActorArchitecture, actors: list[ActorParams]) -> PolicyProvider:
    """Provider over standalone per-agent parameter sets (merged inference)."""
    return PolicyProvider(arch, [(p, None) for p in actors])


# ---------------------------------------------------------------------------
# Phase orchestration
# ---------------------------------------------------------------------------

from .runio import CsvLogger, EVAL_LOG_HEADER, TRAIN_LOG_HEADER  # noqa: E402


def _format_eval(metrics: dict[str, float]) -> dict[str, str]:
    return {k: repr(float(v)) for k, v in metrics.items()}


def _episode_metrics(episodes: list[tuple[float, int, bool]]) -> dict[str, float]:
    if not episodes:
        return {"mean_return": float("nan"), "median_return": float("nan"),
                "success_rate": float("nan")}
    returns = np.array([e[0] for e in episodes])
    return {"mean_return": float(returns.mean()),
            "median_return": float(np.median(returns)),
            "success_rate": float(np.mean([e[2] for e in episodes]))}


def _run_loop(trainer: Trainer, total_steps: int, seed_dir: Path,
              milestone_fracs: Sequence[float],
              checkpoint_prefix: str = "step") -> dict:
    """Shared iteration loop for both phases: trains for ``total_steps`` env
    steps, logging every iteration, evaluating on the configured cadence and
    at milestones, and writing milestone checkpoints (with their eval metrics
    embedded so later phases can assert hand-off identity)."""
    cfg = trainer.cfg
    hyper = trainer.hyper
    steps_per_iter = hyper.rollout_threads * hyper.rollout_length
    n_iters = max(1, math.ceil(total_steps / steps_per_iter)) if total_steps > 0 else 0
    milestone_iter = {max(1, round(frac * n_iters)): frac for frac in milestone_fracs} \
        if n_iters > 0 else {}
    comments = [f"config_hash={config_hash(cfg)}", f"lineage_hash={lineage_hash(cfg)}",
                f"seed={trainer.seed}", f"phase={trainer.phase}"]
    ckpt_dir = seed_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    written: dict[float, Path] = {}
    final_eval: dict[str, float] = {}

    with CsvLogger(seed_dir / "train_log.csv", TRAIN_LOG_HEADER, comments) as tlog, \
            CsvLogger(seed_dir / "eval_log.csv", EVAL_LOG_HEADER, comments) as elog:
        final_eval = trainer.evaluate_now()
        elog.row({"step": trainer.env_steps, "iteration": trainer.iteration_index,
                  **final_eval})
        if n_iters == 0:
            path = ckpt_dir / f"{checkpoint_prefix}_{trainer.env_steps}.ckpt"
            _write_trainer_checkpoint(trainer, path, final_eval, milestone=1.0)
            written[1.0] = path
        for it in range(1, n_iters + 1):
            tic = time.perf_counter()
            stats = trainer.run_iteration()
            wall_ms = (time.perf_counter() - tic) * 1000.0
            ep = _episode_metrics(trainer.drain_train_episodes())
            tlog.row({"step": trainer.env_steps, "iteration": trainer.iteration_index,
                      **ep, "policy_loss": stats.policy_loss,
                      "value_loss": stats.value_loss, "entropy": stats.entropy,
                      "grad_norm": stats.grad_norm, "wall_ms": wall_ms})
            at_milestone = it in milestone_iter
            if at_milestone or it == n_iters or it % cfg.eval_interval == 0:
                final_eval = trainer.evaluate_now()
                elog.row({"step": trainer.env_steps,
                          "iteration": trainer.iteration_index, **final_eval})
            if at_milestone:
                path = ckpt_dir / f"{checkpoint_prefix}_{trainer.env_steps}.ckpt"
                _write_trainer_checkpoint(trainer, path, final_eval,
                                          milestone=milestone_iter[it])
                written[milestone_iter[it]] = path
    return {"checkpoints": written, "final_eval": final_eval,
            "env_steps": trainer.env_steps}


def _write_trainer_checkpoint(trainer: Trainer, path: Path,
                              eval_metrics: dict[str, float],
                              milestone: float | None = None) -> None:
    arrays, meta = trainer.state_arrays()
    meta["eval"] = _format_eval(eval_metrics)
    if milestone is not None:
        meta["milestone"] = milestone
    write_checkpoint(path, arrays, meta)


def pretrain_shared(cfg: RunConfig, seed: int, seed_dir: Path) -> dict:
    """Phase 1: train the regime's backbone(s) and critic for
    ``phase.pretrain_steps`` env steps, emitting milestone checkpoints."""
    seed_dir = Path(seed_dir)
    trainer = Trainer(cfg, seed, phase="pretrain")
    result = _run_loop(trainer, cfg.phase_pretrain_steps, seed_dir,
                       cfg.phase_milestones)
    result["trainer"] = trainer
    return result


class LineageError(RuntimeError):
    """Checkpoint does not descend from this configuration; CLI exit 3."""


def finetune_lora(cfg: RunConfig, seed: int, seed_dir: Path, from_ckpt: Path,
                  rank: int | str | None = None,
                  placement: str | None = None) -> dict:
    """Phase 2: freeze the pretrained backbone, train per-agent adapters.

    The first evaluation (before any update) must equal the checkpoint's
    stored evaluation exactly; that zero-init identity is asserted here at
    runtime. The backbone checksum is verified unchanged at the end.
    """
    import copy

    seed_dir = Path(seed_dir)
    cfg = copy.deepcopy(cfg)
    if rank is not None:
        cfg.regime_lora_rank = rank
        cfg.raw_items["regime.lora_rank"] = str(rank)
    if placement is not None:
        cfg.regime_lora_placement = placement
        cfg.raw_items["regime.lora_placement"] = placement
    arrays, meta = read_checkpoint(from_ckpt)
    if meta.get("lineage_hash") != lineage_hash(cfg):
        raise LineageError(
            f"checkpoint lineage {meta.get('lineage_hash')} != config lineage "
            f"{lineage_hash(cfg)} ({from_ckpt})")
    if meta.get("phase") != "pretrain":
        raise LineageError(f"checkpoint {from_ckpt} is not a pretraining checkpoint")
    if int(meta.get("seed", -1)) != seed:
        raise LineageError(f"checkpoint seed {meta.get('seed')} != requested seed {seed}")

    trainer = Trainer(cfg, seed, phase="finetune")
    trainer.load_pretrained(arrays, meta)
    frozen_before = trainer.bank.backbone_checksum()

    first_eval = trainer.evaluate_now()
    if _format_eval(first_eval) != meta.get("eval"):
        raise RuntimeError(
            "zero-init identity violated: fine-tune step-0 eval "
            f"{_format_eval(first_eval)} != checkpoint eval {meta.get('eval')}")

    result = _run_loop(trainer, cfg.phase_finetune_steps, seed_dir,
                       milestone_fracs=(1.0,), checkpoint_prefix="finetune")
    if trainer.bank.backbone_checksum() != frozen_before:
        raise RuntimeError("frozen-backbone invariant violated during fine-tuning")

    adapters_dir = seed_dir / "adapters"
    adapters_dir.mkdir(parents=True, exist_ok=True)
    merged_dir = seed_dir / "merged"
    merged_dir.mkdir(parents=True, exist_ok=True)
    assert trainer.bank.adapters is not None
    arch = trainer.arch
    arch_meta = {"obs_dim": arch.obs_dim, "id_dim": arch.id_dim,
                 "hidden_dim": arch.hidden_dim, "action_kind": arch.action.kind,
                 "action_n": arch.action.n}
    for i, aset in enumerate(trainer.bank.adapters):
        write_checkpoint(
            adapters_dir / f"agent_{i}.ckpt",
            {name: arr for name, arr in aset.flatten().items()},
            {"agent": i, "rank": aset.rank if isinstance(aset.rank, int) else "full",
             "placement": list(aset.placement), "config_hash": config_hash(cfg),
             "lineage_hash": lineage_hash(cfg), "arch": arch_meta, "kind": "adapters"})
        merged = trainer.bank.merged_actor(i)
        export = {name: arr.astype(np.float32)
                  for name, arr in merged.flatten().items()}
        write_checkpoint(
            merged_dir / f"agent_{i}.ckpt", export,
            {"agent": i, "config_hash": config_hash(cfg),
             "lineage_hash": lineage_hash(cfg), "arch": arch_meta,
             "kind": "merged_policy", "dtype": "float32"})
    result["trainer"] = trainer
    result["first_eval"] = first_eval
    return result
