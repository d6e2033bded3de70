"""Dense numerics used everywhere else: seeded counter-based RNG streams,
Adam, a finite-difference gradient oracle, Frobenius norms, and a one-sided
Jacobi SVD with best rank-r truncation.

All training math is float64. Matrices are plain C-contiguous numpy arrays;
parameter collections are ``dict[str, np.ndarray]`` keyed by parameter name.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

Array = np.ndarray
ArrayDict = "dict[str, np.ndarray]"


def as_matrix(data: Any) -> Array:
    """Coerce to a float64 C-contiguous array and reject non-finite entries."""
    m = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains NaN or Inf")
    return m


def check_finite(arr: Array, what: str = "array") -> Array:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{what} contains non-finite values")
    return arr


# ---------------------------------------------------------------------------
# RNG streams
# ---------------------------------------------------------------------------

class RngStream:
    """Deterministic random stream keyed by (seed, stream_id).

    Backed by the counter-based Philox bit generator, so distinct stream ids
    give statistically independent streams without shared mutable state, and
    a (seed, stream_id, call sequence) triple always reproduces the same
    values. State round-trips through :meth:`get_state` / :meth:`set_state`
    for checkpointing.
    """

    def __init__(self, seed: int, stream_id: int = 0) -> None:
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = int(stream_id) & 0xFFFFFFFFFFFFFFFF
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def normal(self, shape: tuple[int, ...] | int = (), scale: float = 1.0) -> Array:
        return self._gen.standard_normal(size=shape, dtype=np.float64) * scale

    def uniform(self, low: float = 0.0, high: float = 1.0,
                shape: tuple[int, ...] | int = ()) -> Array:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int,
                 shape: tuple[int, ...] | int = ()) -> Array:
        return self._gen.integers(low, high, size=shape, dtype=np.int64)

    def random(self, shape: tuple[int, ...] | int = ()) -> Array:
        return self._gen.random(size=shape, dtype=np.float64)

    def next_seed(self) -> int:
        """Draw a fresh 63-bit seed (for child objects such as episodes)."""
        return int(self._gen.integers(0, 2 ** 63 - 1, dtype=np.int64))

    def get_state(self) -> dict:
        state = self._gen.bit_generator.state
        return {
            "seed": self.seed,
            "stream_id": self.stream_id,
            "counter": [int(x) for x in state["state"]["counter"]],
            "key": [int(x) for x in state["state"]["key"]],
            "buffer": [int(x) for x in state["buffer"]],
            "buffer_pos": int(state["buffer_pos"]),
            "has_uint32": int(state["has_uint32"]),
            "uinteger": int(state["uinteger"]),
        }

    def set_state(self, snap: dict) -> None:
        self.seed = int(snap["seed"])
        self.stream_id = int(snap["stream_id"])
        self._gen.bit_generator.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(snap["counter"], dtype=np.uint64),
                "key": np.array(snap["key"], dtype=np.uint64),
            },
            "buffer": np.array(snap["buffer"], dtype=np.uint64),
            "buffer_pos": int(snap["buffer_pos"]),
            "has_uint32": int(snap["has_uint32"]),
            "uinteger": int(snap["uinteger"]),
        }

    @classmethod
    def from_state(cls, snap: dict) -> "RngStream":
        stream = cls(snap["seed"], snap["stream_id"])
        stream.set_state(snap)
        return stream


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-5
    step: int = 0
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, Array], lr: float,
                   beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-5) -> "AdamState":
        return cls(
            lr=lr, beta1=beta1, beta2=beta2, eps=eps, step=0,
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(params: dict[str, Array], grads: dict[str, Array],
              state: AdamState) -> tuple[dict[str, Array], AdamState]:
    """One Adam update with bias correction; returns new params and state.

    Inputs are left untouched. Shapes of ``grads`` must match ``params``.
    """
    if set(params) != set(grads):
        raise ValueError(f"param/grad name mismatch: {sorted(set(params) ^ set(grads))}")
    t = state.step + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new_params: dict[str, Array] = {}
    new_m: dict[str, Array] = {}
    new_v: dict[str, Array] = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.shape} for '{name}'")
        check_finite(g, f"gradient '{name}'")
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        update = (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
        new_params[name] = p - update
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(lr=state.lr, beta1=state.beta1, beta2=state.beta2,
                                 eps=state.eps, step=t, m=new_m, v=new_v)


def global_grad_norm(grads: dict[str, Array]) -> float:
    """Euclidean norm over every entry of every gradient array."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    return float(np.sqrt(total))


def clip_grads_by_norm(grads: dict[str, Array], max_norm: float) -> tuple[dict[str, Array], float]:
    """Scale all grads so the global norm does not exceed ``max_norm``."""
    norm = global_grad_norm(grads)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def finite_diff_gradient(f: Callable[[dict[str, Array]], float],
                         x: dict[str, Array], h: float = 1e-5) -> dict[str, Array]:
    """Central-difference gradient of a scalar function of named arrays.

    Perturbs one coordinate at a time: (f(x+h e) - f(x-h e)) / (2 h).
    Intended as the independent oracle for analytic backward passes; O(h^2)
    accurate and O(#coords) function evaluations, so keep instances small.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    work = {k: v.astype(np.float64).copy() for k, v in x.items()}
    grads = {k: np.zeros_like(v) for k, v in work.items()}
    for name, arr in work.items():
        flat = arr.reshape(-1)
        gflat = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(f(work))
            flat[i] = orig - h
            f_minus = float(f(work))
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError(f"objective non-finite while perturbing '{name}'[{i}]")
            gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grads


def max_relative_error(a: dict[str, Array], b: dict[str, Array],
                       floor: float = 1e-6) -> float:
    """Worst per-coordinate |a-b| / max(floor, |a|, |b|) over matching keys."""
    worst = 0.0
    for name in a:
        ea, eb = a[name], b[name]
        denom = np.maximum(floor, np.maximum(np.abs(ea), np.abs(eb)))
        worst = max(worst, float(np.max(np.abs(ea - eb) / denom))) if ea.size else worst
    return worst


# ---------------------------------------------------------------------------
# Frobenius norm and Jacobi SVD
# ---------------------------------------------------------------------------

def frobenius_norm(m: Array) -> float:
    """sqrt of the sum of squared entries."""
    m = np.asarray(m, dtype=np.float64)
    return float(np.sqrt(np.sum(m * m)))


def jacobi_svd(m: Array, tol: float = 1e-14, max_sweeps: int = 60) -> tuple[Array, Array, Array]:
    """One-sided Jacobi SVD: returns (U, s, Vt) with singular values sorted
    descending. Accurate and simple at the sizes used here (a few hundred at
    most); not tuned for large matrices.
    """
    a = as_matrix(m)
    transposed = a.shape[0] < a.shape[1]
    if transposed:
        a = a.T.copy()
    rows, cols = a.shape
    work = a.copy()
    v = np.eye(cols)
    for _ in range(max_sweeps):
        off = 0.0
        for p in range(cols - 1):
            for q in range(p + 1, cols):
                app = float(work[:, p] @ work[:, p])
                aqq = float(work[:, q] @ work[:, q])
                apq = float(work[:, p] @ work[:, q])
                denom = np.sqrt(app * aqq)
                if denom == 0.0 or abs(apq) <= tol * denom:
                    continue
                off = max(off, abs(apq) / denom)
                # Rotation zeroing the (p, q) entry of the column Gram matrix.
                tau = (aqq - app) / (2.0 * apq)
                t = np.sign(tau) / (abs(tau) + np.sqrt(1.0 + tau * tau)) if tau != 0 else 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                col_p = work[:, p].copy()
                work[:, p] = c * col_p - s * work[:, q]
                work[:, q] = s * col_p + c * work[:, q]
                vp = v[:, p].copy()
                v[:, p] = c * vp - s * v[:, q]
                v[:, q] = s * vp + c * v[:, q]
        if off == 0.0:
            break
    sigma = np.sqrt(np.sum(work * work, axis=0))
    order = np.argsort(sigma)[::-1]
    sigma = sigma[order]
    work = work[:, order]
    v = v[:, order]
    u = np.zeros_like(work)
    nonzero = sigma > 0
    u[:, nonzero] = work[:, nonzero] / sigma[nonzero]
    if transposed:
        return v, sigma, u.T
    return u, sigma, v.T


def svd_best_rank_r(m: Array, r: int) -> Array:
    """Best Frobenius-norm rank-r approximation via truncated Jacobi SVD."""
    a = as_matrix(m)
    max_rank = min(a.shape)
    if not 1 <= r <= max_rank:
        raise ValueError(f"rank {r} out of range [1, {max_rank}] for shape {a.shape}")
    u, s, vt = jacobi_svd(a)
    return (u[:, :r] * s[:r]) @ vt[:r, :]
