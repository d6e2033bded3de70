"""Diagnostics over trained policies: per-layer Frobenius norm tables,
sparsity-threshold curves, pairwise policy Wasserstein distances, activation
heatmaps, and parameter/efficiency accounting.

All computations are exact (no sampling inside the metrics themselves);
probe states come from stored rollouts of the shared checkpoint so every
agent is compared on one common, policy-relevant state distribution, with
the recurrent state reset for each probe.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .envs import Env
from .lora import AdapterSet, trainable_param_count
from .nn import (
    CONTINUOUS,
    DISCRETE,
    ActorArchitecture,
    ActorParams,
    actor_forward,
    softmax,
)
from .numerics import Array, RngStream, frobenius_norm
from .trainers import PolicyProvider, _append_ids, actor_step


# ---------------------------------------------------------------------------
# Norm tables
# ---------------------------------------------------------------------------

@dataclass
class NormRow:
    layer: str
    reference: float      # ||theta||_F of the full-budget reference run
    shared: float         # ||theta_shared||_F of the pretrained backbone
    merged_mean: float    # mean over agents of ||theta_shared + delta||_F
    delta_mean: float     # mean over agents of ||delta||_F


@dataclass
class NormTable:
    rows: list[NormRow]


def layer_norms(reference: ActorParams, shared: ActorParams,
                adapter_sets: Sequence[AdapterSet],
                arch: ActorArchitecture) -> NormTable:
    """Four norm columns per layer, merged/delta averaged over agents."""
    if set(reference.w) != set(shared.w):
        raise ValueError("reference and shared parameter layers differ")
    rows = []
    for layer in arch.layer_names:
        merged_norms, delta_norms = [], []
        for aset in adapter_sets:
            adapter = aset.adapters.get(layer)
            delta = adapter.delta() if adapter is not None else np.zeros_like(shared.w[layer])
            merged_norms.append(frobenius_norm(shared.w[layer] + delta))
            delta_norms.append(frobenius_norm(delta))
        rows.append(NormRow(
            layer=layer,
            reference=frobenius_norm(reference.w[layer]),
            shared=frobenius_norm(shared.w[layer]),
            merged_mean=float(np.mean(merged_norms)),
            delta_mean=float(np.mean(delta_norms))))
    return NormTable(rows=rows)


# ---------------------------------------------------------------------------
# Sparsity curves
# ---------------------------------------------------------------------------

@dataclass
class SparsityCurve:
    thresholds: Array   # 100 evenly spaced values, min..max of |weights| inclusive
    percent: Array      # percentage of |weights| >= threshold


def sparsity_curve(weights: Sequence[Array]) -> SparsityCurve:
    """Percentage of |weights| at or above 100 evenly spaced thresholds
    spanning [min |w|, max |w|] inclusive."""
    arrays = [np.asarray(w).ravel() for w in weights]
    if not arrays or sum(a.size for a in arrays) == 0:
        raise ValueError("weight collection is empty")
    flat = np.abs(np.concatenate(arrays))
    thresholds = np.linspace(flat.min(), flat.max(), 100)
    percent = np.array([(flat >= t).mean() * 100.0 for t in thresholds])
    return SparsityCurve(thresholds=thresholds, percent=percent)


# ---------------------------------------------------------------------------
# Policy distances
# ---------------------------------------------------------------------------

@dataclass
class DistanceMatrix:
    matrix: Array           # (N, N) mean per-state distances, zero diagonal
    n_probes: int
    probe_seed: int
    source: str = ""


def policy_distance_matrix(arch: ActorArchitecture, actors: Sequence[ActorParams],
                           probe_obs: Array, probe_seed: int = 0,
                           source: str = "") -> DistanceMatrix:
    """Pairwise distances between per-agent policies over common probe states.

    Discrete: W1 under the 0/1 ground metric, which equals total variation
    0.5 * sum |p - q|. Continuous: closed-form 2-Wasserstein between the
    pre-squash diagonal Gaussians, sqrt(|mu1-mu2|^2 + |sigma1-sigma2|^2).
    The recurrent state is reset (zero) for every probe.
    """
    probe_obs = np.asarray(probe_obs, dtype=np.float64)
    if probe_obs.ndim != 2 or probe_obs.shape[0] == 0:
        raise ValueError("probe set must be a non-empty (P, obs_dim) array")
    n_probes = probe_obs.shape[0]
    h0 = np.zeros((n_probes, arch.hidden_dim))
    dists = [actor_step(arch, params, probe_obs, h0)[0] for params in actors]
    n = len(actors)
    matrix = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            if arch.action.kind == DISCRETE:
                p = softmax(dists[i].logits)
                q = softmax(dists[j].logits)
                per_state = 0.5 * np.abs(p - q).sum(axis=-1)
            else:
                dmu = dists[i].mean - dists[j].mean
                dsig = np.exp(dists[i].log_std) - np.exp(dists[j].log_std)
                per_state = np.sqrt((dmu * dmu).sum(axis=-1) + (dsig * dsig).sum(axis=-1))
            matrix[i, j] = matrix[j, i] = float(per_state.mean())
    return DistanceMatrix(matrix=matrix, n_probes=n_probes, probe_seed=probe_seed,
                          source=source)


def collect_probe_states(provider: PolicyProvider, env_factory: Callable[[], Env],
                         n_probes: int, seed: int, id_dim: int,
                         hidden_dim: int) -> Array:
    """Draw probe observations from stochastic rollouts of the given policy.

    Probes are full network inputs (agent ids included as rolled out), so two
    policies evaluated on a probe see identical inputs and differ only
    through their parameters.
    """
    if n_probes < 1:
        raise ValueError("n_probes must be >= 1")
    stream = RngStream(seed, stream_id=7000)
    action_stream = RngStream(seed, stream_id=7001)
    n_par = 8
    envs = [env_factory() for _ in range(n_par)]
    n_agents = envs[0].n_agents
    obs = np.stack([env.reset(stream.next_seed())[0] for env in envs])
    h = np.zeros((n_par, n_agents, hidden_dim))
    rows: list[Array] = []
    while len(rows) * n_par * n_agents < n_probes * 2:  # oversample, then subsample
        obs_in = _append_ids(obs, id_dim)
        rows.append(obs_in.reshape(n_par * n_agents, -1))
        dist, h = provider.act(obs_in, h)
        if dist.kind == DISCRETE:
            flat_logits = dist.logits.reshape(n_par * n_agents, -1)
            draw = action_stream.random((flat_logits.shape[0], 1))
            cum = np.cumsum(softmax(flat_logits), axis=-1)
            actions = np.minimum((draw >= cum).sum(axis=-1),
                                 flat_logits.shape[-1] - 1).reshape(n_par, n_agents)
        else:
            std = np.exp(dist.log_std)
            actions = np.tanh(dist.mean + std * action_stream.normal(dist.mean.shape))
        for w, env in enumerate(envs):
            o, _, _, done, _ = env.step(actions[w])
            if done:
                o, _ = env.reset(stream.next_seed())
                h[w] = 0.0
            obs[w] = o
    pool = np.concatenate(rows, axis=0)
    idx = np.sort(RngStream(seed, stream_id=7002).integers(0, pool.shape[0], n_probes))
    return pool[idx]


# ---------------------------------------------------------------------------
# Activation heatmaps
# ---------------------------------------------------------------------------

HEATMAP_LAYERS = ("fc1", "fc2", "gru", "fc_post")


def activation_heatmap(arch: ActorArchitecture, actors: Sequence[ActorParams],
                       probe_obs: Array,
                       ) -> tuple[list[dict[str, Array]], dict[str, Array]]:
    """Mean |activation| per hidden unit per layer for every agent, plus the
    per-layer cross-agent cosine similarity matrix of those profiles."""
    probe_obs = np.asarray(probe_obs, dtype=np.float64)
    h0 = np.zeros((probe_obs.shape[0], arch.hidden_dim))
    per_agent: list[dict[str, Array]] = []
    for params in actors:
        _, _, trace = actor_forward(arch, params, probe_obs[None, :, :], h0)
        per_agent.append({
            "fc1": np.abs(trace.x1[0]).mean(axis=0),
            "fc2": np.abs(trace.x2[0]).mean(axis=0),
            "gru": np.abs(trace.h[0]).mean(axis=0),
            "fc_post": np.abs(trace.x3[0]).mean(axis=0),
        })
    n = len(actors)
    cosine: dict[str, Array] = {}
    for layer in HEATMAP_LAYERS:
        mat = np.eye(n)
        for i in range(n):
            for j in range(i + 1, n):
                mat[i, j] = mat[j, i] = _cosine(per_agent[i][layer], per_agent[j][layer])
        cosine[layer] = mat
    return per_agent, cosine


def _cosine(a: Array, b: Array) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 and nb == 0.0:
        return 1.0
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


# ---------------------------------------------------------------------------
# Efficiency report
# ---------------------------------------------------------------------------

@dataclass
class EfficiencyRow:
    label: str
    regime: str
    phase: str
    trainable_params: int
    wall_ms_per_1k_steps: float


def efficiency_report(entries: Sequence[dict]) -> list[EfficiencyRow]:
    """Trainable-parameter and wall-clock table across regimes.

    Each entry describes one run: label, regime kind, phase, architecture,
    n_agents, adapter rank/placement (lora phases), and measured wall_ms and
    env_steps from its training log. Counts are exact: nps = N x backbone,
    shared regimes = 1 x backbone (per cluster), lora fine-tune =
    N x sum r (d + k) over placed layers.
    """
    rows = []
    for entry in entries:
        arch: ActorArchitecture = entry["arch"]
        n_agents: int = entry["n_agents"]
        regime: str = entry["regime"]
        phase: str = entry.get("phase", "pretrain")
        if phase == "finetune":
            count = trainable_param_count(arch, entry["rank"], entry["placement"],
                                          n_agents).adapter_total
        elif regime == "nps":
            count = n_agents * arch.backbone_param_count()
        elif regime == "mtl":
            head_layers = [l for l in ("head", "log_std") if l in arch.layer_names]
            extra = sum(int(np.prod(arch.weight_shape(l))) for l in head_layers)
            count = arch.backbone_param_count() + (n_agents - 1) * extra
        else:
            n_clusters = entry.get("n_clusters", 1)
            count = n_clusters * arch.backbone_param_count()
        wall_ms = entry.get("wall_ms_total", float("nan"))
        steps = entry.get("env_steps", 0)
        per_1k = wall_ms / steps * 1000.0 if steps else float("nan")
        rows.append(EfficiencyRow(label=entry.get("label", regime), regime=regime,
                                  phase=phase, trainable_params=int(count),
                                  wall_ms_per_1k_steps=float(per_1k)))
    return rows
