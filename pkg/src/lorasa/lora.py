"""Per-agent low-rank adapters over a frozen shared actor.

Each adapted layer ``l`` carries a factor pair A (d x r) and B (r x k) whose
product offsets the shared weight: effective weight = shared + A @ B. A is
zero-initialized so a fresh adapter set leaves the policy bit-identical to
the backbone; B is random so gradients reach A immediately. Biases are never
adapted.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .numerics import Array, RngStream
from .nn import ActorArchitecture, ActorParams

FULL_RANK = "full"

PLACEMENT_PRESETS: dict[str, tuple[str, ...]] = {
    "all": ("fc1", "fc2", "gru_x", "gru_h", "fc_post", "head", "log_std"),
    "fc1-only": ("fc1",),
    "fc2-only": ("fc2",),
    "gru-only": ("gru_x", "gru_h"),
    "post-only": ("fc_post",),
    "head-only": ("head", "log_std"),
}


def resolve_placement(arch: ActorArchitecture,
                      placement: str | Iterable[str]) -> tuple[str, ...]:
    """Expand a preset name or explicit layer ids to ordered layer names."""
    if isinstance(placement, str):
        if placement not in PLACEMENT_PRESETS:
            raise ValueError(f"unknown placement preset {placement!r}; "
                             f"expected one of {sorted(PLACEMENT_PRESETS)}")
        wanted = PLACEMENT_PRESETS[placement]
        return tuple(l for l in arch.layer_names if l in wanted)
    layers = tuple(placement)
    unknown = [l for l in layers if l not in arch.layer_names]
    if unknown:
        raise ValueError(f"layers {unknown} not in architecture {arch.layer_names}")
    return tuple(l for l in arch.layer_names if l in layers)


def layer_rank(arch: ActorArchitecture, layer: str, rank: int | str) -> int:
    """Factor inner dimension for one layer; 'full' means min(d, k).

    An integer rank above min(d, k) is allowed: the factors are then merely
    over-parameterized (delta already spans the full space), and the
    parameter count stays the literal r * (d + k). Narrow output heads make
    this unavoidable when sweeping a single rank across all layers.
    """
    d, k = arch.weight_shape(layer)
    if rank == FULL_RANK:
        return min(d, k)
    r = int(rank)
    if r < 1:
        raise ValueError("rank must be >= 1")
    return r


@dataclass
class LoraAdapter:
    """One factor pair targeting a named layer."""

    layer: str
    a: Array  # (d, r)
    b: Array  # (r, k)

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    def delta(self) -> Array:
        return self.a @ self.b


@dataclass
class AdapterSet:
    """All adapters owned by one agent, one per placed layer."""

    agent_id: int
    rank: int | str
    placement: tuple[str, ...]
    adapters: dict[str, LoraAdapter]

    def flatten(self) -> dict[str, Array]:
        out: dict[str, Array] = {}
        for layer in self.placement:
            out[f"A.{layer}"] = self.adapters[layer].a
            out[f"B.{layer}"] = self.adapters[layer].b
        return out

    def load_flat(self, flat: dict[str, Array]) -> None:
        for layer in self.placement:
            self.adapters[layer].a = flat[f"A.{layer}"]
            self.adapters[layer].b = flat[f"B.{layer}"]

    def copy(self) -> "AdapterSet":
        return AdapterSet(
            agent_id=self.agent_id, rank=self.rank, placement=self.placement,
            adapters={l: LoraAdapter(l, ad.a.copy(), ad.b.copy())
                      for l, ad in self.adapters.items()})


def init_adapters(arch: ActorArchitecture, rank: int | str,
                  placement: str | Iterable[str], rng: RngStream,
                  agent_id: int = 0) -> AdapterSet:
    """Fresh adapters: A = 0 exactly, B ~ N(0, 1/k) per entry.

    Zero A makes every delta exactly zero, so the adapted policy starts
    bit-identical to the shared one.
    """
    layers = resolve_placement(arch, placement)
    adapters: dict[str, LoraAdapter] = {}
    for layer in layers:
        d, k = arch.weight_shape(layer)
        r = layer_rank(arch, layer, rank)
        a = np.zeros((d, r))
        b = rng.normal((r, k), scale=1.0 / np.sqrt(k))
        adapters[layer] = LoraAdapter(layer, a, b)
    return AdapterSet(agent_id=agent_id, rank=rank, placement=layers, adapters=adapters)


def effective_weights(shared: ActorParams, adapter_set: AdapterSet) -> dict[str, Array]:
    """Per-layer effective weight matrices, shared params untouched.

    Placed layers get shared + A @ B (a fresh array); unplaced layers map to
    the shared matrix itself.
    """
    out: dict[str, Array] = {}
    for layer, w in shared.w.items():
        adapter = adapter_set.adapters.get(layer)
        if adapter is None:
            out[layer] = w
        else:
            if adapter.a.shape[0] != w.shape[0] or adapter.b.shape[1] != w.shape[1]:
                raise ValueError(
                    f"adapter for '{layer}' has delta shape "
                    f"{(adapter.a.shape[0], adapter.b.shape[1])} but weight is {w.shape}")
            out[layer] = w + adapter.a @ adapter.b
    return out


def adapter_gradients(adapter_set: AdapterSet,
                      grad_wrt_effective: dict[str, Array]) -> dict[str, Array]:
    """Chain rule through delta = A @ B: dA = g @ B^T, dB = A^T @ g."""
    grads: dict[str, Array] = {}
    for layer in adapter_set.placement:
        adapter = adapter_set.adapters[layer]
        g = grad_wrt_effective[layer]
        if g.shape != (adapter.a.shape[0], adapter.b.shape[1]):
            raise ValueError(f"grad shape {g.shape} mismatches adapter '{layer}'")
        grads[f"A.{layer}"] = g @ adapter.b.T
        grads[f"B.{layer}"] = adapter.a.T @ g
    return grads


def merge(shared: ActorParams, adapter_set: AdapterSet) -> ActorParams:
    """Fold adapters into a standalone parameter set for inference."""
    merged = shared.copy()
    for layer in adapter_set.placement:
        adapter = adapter_set.adapters[layer]
        merged.w[layer] = merged.w[layer] + adapter.a @ adapter.b
    return merged


@dataclass(frozen=True)
class ParamCount:
    """Adapter and backbone parameter tallies for one configuration."""

    adapter_per_agent: int
    adapter_total: int
    backbone: int
    n_agents: int


def trainable_param_count(arch: ActorArchitecture, rank: int | str,
                          placement: str | Iterable[str],
                          n_agents: int) -> ParamCount:
    """Exact adapter parameter count, sum of r * (d + k) over placed layers."""
    layers = resolve_placement(arch, placement)
    per_agent = 0
    for layer in layers:
        d, k = arch.weight_shape(layer)
        per_agent += layer_rank(arch, layer, rank) * (d + k)
    return ParamCount(adapter_per_agent=per_agent,
                      adapter_total=per_agent * n_agents,
                      backbone=arch.backbone_param_count(),
                      n_agents=n_agents)
