"""Recurrent actor and centralized critic with hand-written forward/backward.

The actor is FC1 -> ReLU -> FC2 -> ReLU -> GRU -> FC_POST -> ReLU -> head(s),
evaluated time-major over ``(T, B, ...)`` batches. Gradients are exact
reverse-mode; an optional chunk length truncates the hidden-state gradient at
chunk boundaries for chunked backpropagation through time. Weight matrices
can be swapped at call time via an ``override`` mapping, which is how
low-rank-adapted effective weights enter without touching the shared params.

GRU convention: gates stacked (z, r, n) in that order; z and r are sigmoid,
the candidate n is tanh and applies the reset gate to the hidden projection,
n = tanh(Wx_n x + bx_n + r * (Wh_n h + bh_n)); new state (1 - z) * n + z * h.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .numerics import Array, RngStream, check_finite

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
TANH_EPS = 1e-6  # floor inside log(1 - tanh(u)^2 + eps)
HEAD_GAIN = 0.01

DISCRETE = "discrete"
CONTINUOUS = "continuous"


@dataclass(frozen=True)
class ActionSpec:
    """Action head description: n discrete actions or a continuous dim."""

    kind: str
    n: int

    def __post_init__(self) -> None:
        if self.kind not in (DISCRETE, CONTINUOUS):
            raise ValueError(f"unknown action kind {self.kind!r}")
        if self.n < 1:
            raise ValueError("action dimension must be >= 1")


@dataclass(frozen=True)
class ActorArchitecture:
    """Shape bookkeeping for the recurrent actor.

    ``id_dim`` is the length of the one-hot agent id appended to the
    observation (0 when the regime does not append ids).
    """

    obs_dim: int
    action: ActionSpec
    id_dim: int = 0
    hidden_dim: int = 64

    @property
    def input_dim(self) -> int:
        return self.obs_dim + self.id_dim

    @property
    def layer_names(self) -> tuple[str, ...]:
        names = ("fc1", "fc2", "gru_x", "gru_h", "fc_post", "head")
        if self.action.kind == CONTINUOUS:
            names = names + ("log_std",)
        return names

    def weight_shape(self, name: str) -> tuple[int, int]:
        h = self.hidden_dim
        shapes = {
            "fc1": (h, self.input_dim),
            "fc2": (h, h),
            "gru_x": (3 * h, h),
            "gru_h": (3 * h, h),
            "fc_post": (h, h),
            "head": (self.action.n, h),
            "log_std": (self.action.n, h),
        }
        if name not in shapes or name not in self.layer_names:
            raise KeyError(f"unknown layer {name!r}")
        return shapes[name]

    def bias_shape(self, name: str) -> tuple[int]:
        return (self.weight_shape(name)[0],)

    @property
    def adaptable_layers(self) -> tuple[str, ...]:
        """Weight matrices eligible for low-rank adaptation (never biases)."""
        return self.layer_names

    def backbone_param_count(self) -> int:
        total = 0
        for name in self.layer_names:
            d, k = self.weight_shape(name)
            total += d * k + d
        return total


@dataclass
class ActorParams:
    """Per-layer weight matrices and bias vectors for one actor."""

    w: dict[str, Array]
    b: dict[str, Array]

    def copy(self) -> "ActorParams":
        return ActorParams(w={k: v.copy() for k, v in self.w.items()},
                           b={k: v.copy() for k, v in self.b.items()})

    def flatten(self) -> dict[str, Array]:
        out = {f"w.{k}": v for k, v in self.w.items()}
        out.update({f"b.{k}": v for k, v in self.b.items()})
        return out

    @classmethod
    def from_flat(cls, flat: dict[str, Array]) -> "ActorParams":
        w = {k[2:]: v for k, v in flat.items() if k.startswith("w.")}
        b = {k[2:]: v for k, v in flat.items() if k.startswith("b.")}
        return cls(w=w, b=b)


@dataclass
class CriticParams:
    """Two hidden ReLU layers then a linear scalar head over the global state."""

    w: dict[str, Array]
    b: dict[str, Array]

    layer_order = ("fc1", "fc2", "out")

    def copy(self) -> "CriticParams":
        return CriticParams(w={k: v.copy() for k, v in self.w.items()},
                            b={k: v.copy() for k, v in self.b.items()})

    def flatten(self) -> dict[str, Array]:
        out = {f"w.{k}": v for k, v in self.w.items()}
        out.update({f"b.{k}": v for k, v in self.b.items()})
        return out


@dataclass
class DistParams:
    """Policy distribution parameters for a batch (or sequence) of states."""

    kind: str
    logits: Array | None = None
    mean: Array | None = None
    log_std: Array | None = None

    def step(self, t: int) -> "DistParams":
        if self.kind == DISCRETE:
            return DistParams(DISCRETE, logits=self.logits[t])
        return DistParams(CONTINUOUS, mean=self.mean[t], log_std=self.log_std[t])


@dataclass
class ForwardTrace:
    """Activations recorded by actor_forward, consumed by actor_backward."""

    obs: Array            # (T, B, input_dim)
    x1: Array             # post-ReLU (T, B, H)
    x2: Array
    hp: Array             # masked previous hidden per step (T, B, H)
    z: Array
    r: Array
    n: Array
    hn: Array             # Wh_n h + bh_n, pre reset-gate product
    h: Array              # hidden outputs (T, B, H)
    x3: Array             # post-ReLU (T, B, H)
    reset_mask: Array | None
    log_std_unclamped: Array | None = None


def _dense(x: Array, w: Array, b: Array) -> Array:
    """x @ w.T + b with leading dims flattened into one BLAS call.

    Adds in place on the gemm output; this code path is memory-bound on
    modest hardware, so avoiding full-size temporaries matters.
    """
    lead = x.shape[:-1]
    out = x.reshape(-1, x.shape[-1]) @ w.T
    out += b
    return out.reshape(lead + (w.shape[0],))


def _dense_relu(x: Array, w: Array, b: Array) -> Array:
    lead = x.shape[:-1]
    out = x.reshape(-1, x.shape[-1]) @ w.T
    out += b
    np.maximum(out, 0.0, out=out)
    return out.reshape(lead + (w.shape[0],))


def _pick(name: str, params: ActorParams,
          override: dict[str, Array] | None) -> Array:
    if override is not None and name in override:
        return override[name]
    return params.w[name]


def actor_forward(arch: ActorArchitecture, params: ActorParams, obs_seq: Array,
                  h0: Array, override: dict[str, Array] | None = None,
                  reset_mask: Array | None = None,
                  ) -> tuple[DistParams, Array, ForwardTrace]:
    """Run the actor over a time-major batch of observation sequences.

    Args:
        obs_seq: (T, B, obs_dim + id_dim) observations (ids already appended).
        h0: (B, H) initial hidden state.
        override: optional effective weight matrix per layer name; layers not
            present fall back to ``params``. Biases always come from params.
        reset_mask: optional (T, B) multiplier applied to the incoming hidden
            state at each step; 0 marks the start of a new episode.

    Returns (distribution sequence, final hidden state, trace for backward).
    """
    obs_seq = np.asarray(obs_seq, dtype=np.float64)
    if obs_seq.ndim != 3:
        raise ValueError(f"obs_seq must be (T, B, D), got shape {obs_seq.shape}")
    t_len, batch, in_dim = obs_seq.shape
    hidden = arch.hidden_dim
    if in_dim != arch.input_dim:
        raise ValueError(f"obs dim {in_dim} != architecture input dim {arch.input_dim}")
    h0 = np.asarray(h0, dtype=np.float64)
    if h0.shape != (batch, hidden):
        raise ValueError(f"h0 shape {h0.shape} != {(batch, hidden)}")

    w1 = _pick("fc1", params, override)
    w2 = _pick("fc2", params, override)
    wx = _pick("gru_x", params, override)
    wh = _pick("gru_h", params, override)
    w3 = _pick("fc_post", params, override)
    whead = _pick("head", params, override)

    x1 = _dense_relu(obs_seq, w1, params.b["fc1"])
    x2 = _dense_relu(x1, w2, params.b["fc2"])

    gx = _dense(x2, wx, params.b["gru_x"])  # (T, B, 3H)
    trace_block = np.empty((6, t_len, batch, hidden))
    hp, z, r, n, hn, h_seq = trace_block
    bh = params.b["gru_h"]
    wh_t = np.ascontiguousarray(wh.T)
    gh = np.empty((batch, 3 * hidden))
    h = h0
    for t in range(t_len):
        # h_in lives in the trace (hp[t]); all step math is in place on
        # cache-resident buffers.
        if reset_mask is not None:
            np.multiply(h, reset_mask[t][:, None], out=hp[t])
        else:
            hp[t] = h
        np.dot(hp[t], wh_t, out=gh)
        gh += bh
        zr = z[t], r[t]
        for half, sl in zip(zr, (slice(0, hidden), slice(hidden, 2 * hidden))):
            np.add(gx[t, :, sl], gh[:, sl], out=half)
            half *= 0.5
            np.tanh(half, out=half)
            half += 1.0
            half *= 0.5
        hn[t] = gh[:, 2 * hidden:]
        np.multiply(r[t], hn[t], out=n[t])
        n[t] += gx[t, :, 2 * hidden:]
        np.tanh(n[t], out=n[t])
        np.subtract(hp[t], n[t], out=h_seq[t])
        h_seq[t] *= z[t]
        h_seq[t] += n[t]
        h = h_seq[t]

    x3 = _dense_relu(h_seq, w3, params.b["fc_post"])

    log_std_unclamped = None
    if arch.action.kind == DISCRETE:
        dist = DistParams(DISCRETE, logits=_dense(x3, whead, params.b["head"]))
    else:
        wstd = _pick("log_std", params, override)
        mean = _dense(x3, whead, params.b["head"])
        log_std_unclamped = _dense(x3, wstd, params.b["log_std"])
        dist = DistParams(CONTINUOUS, mean=mean,
                          log_std=np.clip(log_std_unclamped, LOG_STD_MIN, LOG_STD_MAX))

    trace = ForwardTrace(obs=obs_seq, x1=x1, x2=x2, hp=hp, z=z, r=r, n=n, hn=hn,
                         h=h_seq, x3=x3, reset_mask=reset_mask,
                         log_std_unclamped=log_std_unclamped)
    return dist, h_seq[-1].copy(), trace


def _sigmoid(x: Array) -> Array:
    # 0.5 * (tanh(x/2) + 1): one ufunc, overflow-free for any finite x.
    out = np.tanh(0.5 * x)
    out += 1.0
    out *= 0.5
    return out


def actor_backward(arch: ActorArchitecture, params: ActorParams,
                   trace: ForwardTrace, upstream: dict[str, Array],
                   override: dict[str, Array] | None = None,
                   chunk_len: int | None = None) -> dict[str, Array]:
    """Exact reverse-mode gradients for the actor.

    ``upstream`` carries gradients on the distribution parameters:
    ``{"logits": (T,B,n)}`` or ``{"mean": ..., "log_std": ...}``. Weight
    gradients are taken with respect to the weights actually used in the
    forward pass, i.e. the effective weights when an override was supplied
    (the low-rank factor chain rule consumes them downstream).

    ``chunk_len`` truncates hidden-state gradients every ``chunk_len`` steps;
    leave it None for gradients of the full-sequence loss (required when
    checking against finite differences).
    """
    t_len, batch, _ = trace.obs.shape
    hidden = arch.hidden_dim

    w2 = _pick("fc2", params, override)
    wx = _pick("gru_x", params, override)
    wh = _pick("gru_h", params, override)
    w3 = _pick("fc_post", params, override)
    whead = _pick("head", params, override)

    grads: dict[str, Array] = {}

    # Head(s) back to x3.
    if arch.action.kind == DISCRETE:
        dhead_out = np.asarray(upstream["logits"], dtype=np.float64)
        dx3 = _matflat(dhead_out, whead)
        grads["w.head"] = _flat_outer(dhead_out, trace.x3)
        grads["b.head"] = dhead_out.sum(axis=(0, 1))
    else:
        dmean = np.asarray(upstream["mean"], dtype=np.float64)
        dstd = np.asarray(upstream["log_std"], dtype=np.float64)
        in_range = ((trace.log_std_unclamped > LOG_STD_MIN)
                    & (trace.log_std_unclamped < LOG_STD_MAX))
        dstd = dstd * in_range
        wstd = _pick("log_std", params, override)
        dx3 = _matflat(dmean, whead)
        dx3 += _matflat(dstd, wstd)
        grads["w.head"] = _flat_outer(dmean, trace.x3)
        grads["b.head"] = dmean.sum(axis=(0, 1))
        grads["w.log_std"] = _flat_outer(dstd, trace.x3)
        grads["b.log_std"] = dstd.sum(axis=(0, 1))

    dx3 *= trace.x3 > 0
    dh_from_post = _matflat(dx3, w3)
    grads["w.fc_post"] = _flat_outer(dx3, trace.h)
    grads["b.fc_post"] = dx3.sum(axis=(0, 1))

    # GRU backward through time. Per-step terms that do not depend on the
    # recurrent gradient are precomputed vectorized over all steps.
    hp_minus_n = trace.hp - trace.n
    one_minus_z = 1.0 - trace.z
    dsig_z = trace.z * one_minus_z
    dsig_r = trace.r * (1.0 - trace.r)
    dtanh_n = 1.0 - trace.n * trace.n
    dgx = np.empty((t_len, batch, 3 * hidden))
    dgh = np.empty_like(dgx)
    carry = np.zeros((batch, hidden))
    scratch = np.empty((batch, hidden))
    dhp = np.empty((batch, hidden))
    for t in range(t_len - 1, -1, -1):
        dh = dh_from_post[t]
        dh += carry
        daz = dgx[t, :, :hidden]
        np.multiply(dh, hp_minus_n[t], out=daz)      # dz
        daz *= dsig_z[t]
        dan = dgx[t, :, 2 * hidden:]
        np.multiply(dh, one_minus_z[t], out=dan)     # dn
        dan *= dtanh_n[t]
        dar = dgx[t, :, hidden:2 * hidden]
        np.multiply(dan, trace.hn[t], out=dar)       # dr
        dar *= dsig_r[t]
        dgh[t, :, :2 * hidden] = dgx[t, :, :2 * hidden]
        dhn = dgh[t, :, 2 * hidden:]
        np.multiply(dan, trace.r[t], out=dhn)
        np.dot(dgh[t], wh, out=dhp)
        np.multiply(dh, trace.z[t], out=scratch)
        dhp += scratch
        if trace.reset_mask is not None:
            dhp *= trace.reset_mask[t][:, None]
        if chunk_len is not None and t % chunk_len == 0:
            carry[:] = 0.0
        else:
            carry, dhp = dhp, carry  # ping-pong buffers

    grads["w.gru_x"] = _flat_outer(dgx, trace.x2)
    grads["b.gru_x"] = dgx.sum(axis=(0, 1))
    grads["w.gru_h"] = _flat_outer(dgh, trace.hp)
    grads["b.gru_h"] = dgh.sum(axis=(0, 1))

    dx2 = _matflat(dgx, wx)
    dx2 *= trace.x2 > 0
    grads["w.fc2"] = _flat_outer(dx2, trace.x1)
    grads["b.fc2"] = dx2.sum(axis=(0, 1))
    dx1 = _matflat(dx2, w2)
    dx1 *= trace.x1 > 0
    grads["w.fc1"] = _flat_outer(dx1, trace.obs)
    grads["b.fc1"] = dx1.sum(axis=(0, 1))
    return grads


def _matflat(dout: Array, w: Array) -> Array:
    """dout @ w over flattened leading dims; one gemm instead of a batch."""
    lead = dout.shape[:-1]
    out = dout.reshape(-1, dout.shape[-1]) @ w
    return out.reshape(lead + (w.shape[1],))


def _flat_outer(dout: Array, xin: Array) -> Array:
    """Sum of per-sample outer products over time and batch dims."""
    dflat = dout.reshape(-1, dout.shape[-1])
    xflat = xin.reshape(-1, xin.shape[-1])
    return dflat.T @ xflat


# ---------------------------------------------------------------------------
# Distributions
# ---------------------------------------------------------------------------

def log_softmax(logits: Array) -> Array:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: Array) -> Array:
    return np.exp(log_softmax(logits))


def gaussian_log_prob(u: Array, mean: Array, log_std: Array) -> Array:
    """Diagonal Gaussian log density of pre-squash values, summed over dims."""
    var = np.exp(2.0 * log_std)
    return (-0.5 * (u - mean) ** 2 / var - log_std - 0.5 * np.log(2.0 * np.pi)).sum(axis=-1)


def squashed_log_prob(u: Array, a: Array, mean: Array, log_std: Array) -> Array:
    """Log density of a = tanh(u) including the change-of-variables term."""
    return gaussian_log_prob(u, mean, log_std) - np.log(1.0 - a * a + TANH_EPS).sum(axis=-1)


def sample_squashed(dist: DistParams, rng: RngStream) -> tuple[Array, Array, Array]:
    """Draw (action, pre-squash u, log_prob) from a squashed Gaussian."""
    std = np.exp(dist.log_std)
    u = dist.mean + std * rng.normal(dist.mean.shape)
    a = np.tanh(u)
    np.clip(a, -1.0 + 1e-12, 1.0 - 1e-12, out=a)
    return a, u, squashed_log_prob(u, a, dist.mean, dist.log_std)


def sample_action(dist: DistParams, mode: str, rng: RngStream | None = None,
                  ) -> tuple[Array, Array]:
    """Sample (or take the mode of) the policy distribution.

    Discrete: categorical over softmax(logits); deterministic picks the
    argmax with lowest-index tie-break. Continuous: a = tanh(u) with
    u ~ N(mean, exp(log_std)^2); deterministic returns tanh(mean). Log-probs
    match :func:`evaluate_logprob_entropy`.
    """
    if mode not in ("stochastic", "deterministic"):
        raise ValueError(f"unknown mode {mode!r}")
    if dist.kind == DISCRETE:
        logp_all = log_softmax(dist.logits)
        if mode == "deterministic":
            action = np.argmax(dist.logits, axis=-1)
        else:
            if rng is None:
                raise ValueError("stochastic sampling needs an RngStream")
            probs = np.exp(logp_all)
            cum = np.cumsum(probs, axis=-1)
            draw = rng.random(dist.logits.shape[:-1] + (1,))
            action = np.minimum((draw >= cum).sum(axis=-1), dist.logits.shape[-1] - 1)
        return action, np.take_along_axis(logp_all, action[..., None], axis=-1)[..., 0]
    if mode == "deterministic":
        a = np.tanh(dist.mean)
        np.clip(a, -1.0 + 1e-12, 1.0 - 1e-12, out=a)
        return a, squashed_log_prob(dist.mean, a, dist.mean, dist.log_std)
    if rng is None:
        raise ValueError("stochastic sampling needs an RngStream")
    a, _, logp = sample_squashed(dist, rng)
    return a, logp


def evaluate_logprob_entropy(dist: DistParams, action: Array) -> tuple[Array, Array]:
    """Log-prob of a given action plus the distribution entropy.

    Continuous entropy is the pre-squash Gaussian entropy (the squashed
    density has no closed-form entropy); actions must lie strictly inside
    (-1, 1) and are inverted with atanh.
    """
    if dist.kind == DISCRETE:
        action = np.asarray(action)
        n = dist.logits.shape[-1]
        if np.any(action < 0) or np.any(action >= n):
            raise ValueError(f"discrete action out of range [0, {n})")
        logp_all = log_softmax(dist.logits)
        probs = np.exp(logp_all)
        entropy = -(probs * logp_all).sum(axis=-1)
        logp = np.take_along_axis(logp_all, action[..., None].astype(np.int64), axis=-1)[..., 0]
        return logp, entropy
    a = np.asarray(action, dtype=np.float64)
    if np.any(np.abs(a) >= 1.0):
        raise ValueError("continuous action must lie strictly inside (-1, 1)")
    u = np.arctanh(a)
    logp = squashed_log_prob(u, a, dist.mean, dist.log_std)
    entropy = (dist.log_std + 0.5 * np.log(2.0 * np.pi * np.e)).sum(axis=-1)
    return logp, entropy


# ---------------------------------------------------------------------------
# Critic
# ---------------------------------------------------------------------------

@dataclass
class CriticTrace:
    state: Array
    x1: Array
    x2: Array


def critic_forward(params: CriticParams, state: Array) -> tuple[Array, CriticTrace]:
    """Value of each global state; returns (values (B,), trace)."""
    state = np.asarray(state, dtype=np.float64)
    squeeze = state.ndim == 1
    if squeeze:
        state = state[None, :]
    x1 = np.maximum(_dense(state, params.w["fc1"], params.b["fc1"]), 0.0)
    x2 = np.maximum(_dense(x1, params.w["fc2"], params.b["fc2"]), 0.0)
    values = _dense(x2, params.w["out"], params.b["out"])[:, 0]
    if squeeze:
        values = values[0]
    return values, CriticTrace(state=state, x1=x1, x2=x2)


def critic_backward(params: CriticParams, trace: CriticTrace,
                    dvalues: Array) -> dict[str, Array]:
    """Gradients of sum(dvalues * values) with respect to critic params."""
    dv = np.asarray(dvalues, dtype=np.float64).reshape(-1, 1)
    grads: dict[str, Array] = {}
    grads["w.out"] = dv.T @ trace.x2
    grads["b.out"] = dv.sum(axis=0)
    dx2 = (dv @ params.w["out"]) * (trace.x2 > 0)
    grads["w.fc2"] = dx2.T @ trace.x1
    grads["b.fc2"] = dx2.sum(axis=0)
    dx1 = (dx2 @ params.w["fc2"]) * (trace.x1 > 0)
    grads["w.fc1"] = dx1.T @ trace.state
    grads["b.fc1"] = dx1.sum(axis=0)
    return grads


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def orthogonal(shape: tuple[int, int], gain: float, rng: RngStream) -> Array:
    """Gain-scaled orthogonal matrix (rows or columns orthonormal)."""
    rows, cols = shape
    flat = rng.normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    q = q * np.sign(np.diag(r))  # fix sign ambiguity for determinism across builds
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def init_actor_params(arch: ActorArchitecture, rng: RngStream) -> ActorParams:
    """Orthogonal init: sqrt(2) on ReLU layers, 1 on GRU projections
    (per gate block), 0.01 on output head(s); biases zero."""
    w: dict[str, Array] = {}
    b: dict[str, Array] = {}
    h = arch.hidden_dim
    for name in arch.layer_names:
        shape = arch.weight_shape(name)
        if name in ("fc1", "fc2", "fc_post"):
            w[name] = orthogonal(shape, np.sqrt(2.0), rng)
        elif name in ("gru_x", "gru_h"):
            blocks = [orthogonal((h, shape[1]), 1.0, rng) for _ in range(3)]
            w[name] = np.concatenate(blocks, axis=0)
        else:
            w[name] = orthogonal(shape, HEAD_GAIN, rng)
        b[name] = np.zeros(arch.bias_shape(name))
    return ActorParams(w=w, b=b)


def init_critic_params(state_dim: int, hidden_dim: int, rng: RngStream) -> CriticParams:
    w = {
        "fc1": orthogonal((hidden_dim, state_dim), np.sqrt(2.0), rng),
        "fc2": orthogonal((hidden_dim, hidden_dim), np.sqrt(2.0), rng),
        "out": orthogonal((1, hidden_dim), 1.0, rng),
    }
    b = {"fc1": np.zeros(hidden_dim), "fc2": np.zeros(hidden_dim), "out": np.zeros(1)}
    return CriticParams(w=w, b=b)


def append_agent_id(obs: Array, agent_index: int, id_dim: int) -> Array:
    """Concatenate a one-hot agent id to trailing observation features."""
    if id_dim == 0:
        return obs
    onehot = np.zeros(obs.shape[:-1] + (id_dim,))
    onehot[..., agent_index] = 1.0
    return np.concatenate([obs, onehot], axis=-1)
