"""Two seedable cooperative environments with built-in role heterogeneity.

hetero-grid: N agents on a small grid, each rewarded only for reaching the
goal cell of its own color, so identity-blind policies cap out at a fraction
of the return. hetero-spread: N point masses, each pulled toward the landmark
with its own index. Both have homogeneous twins where the assignment becomes
nearest-match, making roles interchangeable.

Rewards are team-shared scalars: every agent sees the same r_t.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .numerics import Array, RngStream

GRID_OBS_SCALE = 6.0  # fixed so checkpoints stay layout-independent


class Env:
    """Common environment surface: reset(seed) then step(joint_action).

    Attributes
        n_agents, obs_dim, state_dim, episode_limit
        action_kind: "discrete" or "continuous"
        action_dim: number of discrete actions, or continuous dims per agent
    """

    n_agents: int
    obs_dim: int
    state_dim: int
    episode_limit: int
    action_kind: str
    action_dim: int

    def reset(self, seed: int) -> tuple[Array, Array]:
        raise NotImplementedError

    def step(self, joint_action: Array) -> tuple[Array, Array, float, bool, dict]:
        raise NotImplementedError

    def get_state(self) -> dict[str, Any]:
        raise NotImplementedError

    def set_state(self, state: dict[str, Any]) -> None:
        raise NotImplementedError


class GridRescue(Env):
    """Grid navigation with color-matched goals (discrete, 5 actions).

    Agents spawn on a fixed row; goals land on seeded distinct cells each
    episode. Reward per step is -0.01 plus 1/N for every newly satisfied
    goal. Hetero mode: goal i counts only when agent i stands on it.
    Homogeneous mode: a goal counts when any agent first covers it. Episode
    ends when every goal is satisfied or at the step limit. Agents may
    overlap; moves into walls are no-ops.

    State lives in plain Python ints (N is tiny; per-step numpy overhead
    would dominate the training loop).
    """

    action_kind = "discrete"
    action_dim = 5

    _DELTAS = ((0, 1), (0, -1), (-1, 0), (1, 0), (0, 0))  # up, down, left, right, stay

    def __init__(self, size: int = 7, n_agents: int = 3, episode_limit: int = 50,
                 hetero: bool = True) -> None:
        if n_agents > size:
            raise ValueError("too many agents for the spawn row")
        self.size = size
        self.n_agents = n_agents
        self.episode_limit = episode_limit
        self.hetero = hetero
        self.obs_dim = 2 + 2 * n_agents + n_agents
        self.state_dim = 5 * n_agents
        # Adjacent center cells of the fixed spawn row; the seeded reset deals
        # them out in a per-episode order so position never proxies identity
        # and the one-hot id is the only identity signal available.
        first = (size - n_agents) // 2
        self._spawn_cells = [(first + i, 0) for i in range(n_agents)]
        self._goal_min_row = min(2, size - 1)
        self._pos: list[tuple[int, int]] = list(self._spawn_cells)
        self._goals: list[tuple[int, int]] = [(0, 0)] * n_agents
        self._flags: list[bool] = [False] * n_agents
        self._steps = 0
        self._done = True

    def reset(self, seed: int) -> tuple[Array, Array]:
        stream = RngStream(seed, stream_id=0)
        order = list(self._spawn_cells)
        for i in range(len(order) - 1, 0, -1):  # seeded Fisher-Yates
            j = int(stream.integers(0, i + 1))
            order[i], order[j] = order[j], order[i]
        self._pos = order
        goal_cells: list[tuple[int, int]] = []
        taken: set[tuple[int, int]] = set()
        while len(goal_cells) < self.n_agents:
            x = int(stream.integers(0, self.size))
            y = int(stream.integers(self._goal_min_row, self.size))
            if (x, y) not in taken:
                taken.add((x, y))
                goal_cells.append((x, y))
        self._goals = goal_cells
        self._flags = [False] * self.n_agents
        self._steps = 0
        self._done = False
        return self._observations(), self._global_state()

    def step(self, joint_action: Array) -> tuple[Array, Array, float, bool, dict]:
        if self._done:
            raise RuntimeError("step() called on a finished episode; reset first")
        acts = [int(a) for a in joint_action]
        if len(acts) != self.n_agents or min(acts) < 0 or max(acts) >= 5:
            raise ValueError(f"joint action must be {self.n_agents} ints in [0, 5)")
        hi = self.size - 1
        pos = self._pos
        for i, a in enumerate(acts):
            dx, dy = self._DELTAS[a]
            x, y = pos[i]
            pos[i] = (min(max(x + dx, 0), hi), min(max(y + dy, 0), hi))
        newly = 0
        flags = self._flags
        if self.hetero:
            for i in range(self.n_agents):
                if not flags[i] and pos[i] == self._goals[i]:
                    flags[i] = True
                    newly += 1
        else:
            for g in range(self.n_agents):
                if not flags[g] and self._goals[g] in pos:
                    flags[g] = True
                    newly += 1
        reward = -0.01 + newly / self.n_agents
        self._steps += 1
        success = all(flags)
        self._done = success or self._steps >= self.episode_limit
        info = {"success": success}
        return self._observations(), self._global_state(), reward, self._done, info

    def _observations(self) -> Array:
        scale = GRID_OBS_SCALE
        flat: list[float] = []
        flags = [1.0 if f else 0.0 for f in self._flags]
        for x, y in self._pos:
            flat.append(x / scale)
            flat.append(y / scale)
            for gx, gy in self._goals:
                flat.append((gx - x) / scale)
                flat.append((gy - y) / scale)
            flat.extend(flags)
        return np.asarray(flat).reshape(self.n_agents, self.obs_dim)

    def _global_state(self) -> Array:
        scale = GRID_OBS_SCALE
        vals = [c / scale for xy in self._pos for c in xy]
        vals += [c / scale for xy in self._goals for c in xy]
        vals += [1.0 if f else 0.0 for f in self._flags]
        return np.asarray(vals)

    def get_state(self) -> dict[str, Any]:
        return {"pos": np.asarray(self._pos, dtype=np.int64),
                "goals": np.asarray(self._goals, dtype=np.int64),
                "flags": np.asarray(self._flags, dtype=bool),
                "steps": self._steps, "done": self._done}

    def set_state(self, state: dict[str, Any]) -> None:
        self._pos = [(int(x), int(y)) for x, y in np.asarray(state["pos"])]
        self._goals = [(int(x), int(y)) for x, y in np.asarray(state["goals"])]
        self._flags = [bool(f) for f in np.asarray(state["flags"])]
        self._steps = int(state["steps"])
        self._done = bool(state["done"])

    def observations(self) -> Array:
        return self._observations()

    def global_state(self) -> Array:
        return self._global_state()


class Spread(Env):
    """Point masses steering toward landmarks (continuous, 2-D forces).

    Dynamics: v' = (1 - damping) v + a dt, p' = clip(p + v' dt, [-2, 2]^2).
    Reward: -(1/N) sum_i dist(p_i, landmark_i) - 0.01 (1/N) sum_i |a_i|^2 in
    hetero mode; the homogeneous twin scores each agent against its nearest
    landmark. Fixed 100-step episodes.
    """

    action_kind = "continuous"
    action_dim = 2

    def __init__(self, n_agents: int = 3, episode_limit: int = 100,
                 hetero: bool = True) -> None:
        self.n_agents = n_agents
        self.episode_limit = episode_limit
        self.hetero = hetero
        self.dt = 0.1
        self.damping = 0.25
        self.bound = 2.0
        self.obs_dim = 4 + 2 * n_agents
        self.state_dim = 6 * n_agents
        self._pos = np.zeros((n_agents, 2))
        self._vel = np.zeros((n_agents, 2))
        self._landmarks = np.zeros((n_agents, 2))
        self._steps = 0
        self._done = True

    def reset(self, seed: int) -> tuple[Array, Array]:
        stream = RngStream(seed, stream_id=0)
        self._pos = stream.uniform(-1.0, 1.0, (self.n_agents, 2))
        self._landmarks = stream.uniform(-1.5, 1.5, (self.n_agents, 2))
        self._vel = np.zeros((self.n_agents, 2))
        self._steps = 0
        self._done = False
        return self._observations(), self._global_state()

    def step(self, joint_action: Array) -> tuple[Array, Array, float, bool, dict]:
        if self._done:
            raise RuntimeError("step() called on a finished episode; reset first")
        acts = np.asarray(joint_action, dtype=np.float64)
        if acts.shape != (self.n_agents, 2):
            raise ValueError(f"joint action must have shape {(self.n_agents, 2)}")
        if np.any(np.abs(acts) > 1.0):
            raise ValueError("continuous actions must lie in [-1, 1] per dimension")
        self._vel = (1.0 - self.damping) * self._vel + acts * self.dt
        self._pos = np.clip(self._pos + self._vel * self.dt, -self.bound, self.bound)
        if self.hetero:
            dists = np.linalg.norm(self._pos - self._landmarks, axis=1)
        else:
            all_d = np.linalg.norm(self._pos[:, None, :] - self._landmarks[None, :, :], axis=2)
            dists = all_d.min(axis=1)
        reward = float(-dists.mean() - 0.01 * np.mean(np.sum(acts * acts, axis=1)))
        self._steps += 1
        self._done = self._steps >= self.episode_limit
        return self._observations(), self._global_state(), reward, self._done, {"success": False}

    def _observations(self) -> Array:
        obs = np.empty((self.n_agents, self.obs_dim))
        obs[:, 0:2] = self._pos
        obs[:, 2:4] = self._vel
        rel = self._landmarks[None, :, :] - self._pos[:, None, :]
        obs[:, 4:] = rel.reshape(self.n_agents, -1)
        return obs

    def _global_state(self) -> Array:
        return np.concatenate([self._pos.ravel(), self._vel.ravel(),
                               self._landmarks.ravel()])

    def get_state(self) -> dict[str, Any]:
        return {"pos": self._pos.copy(), "vel": self._vel.copy(),
                "landmarks": self._landmarks.copy(), "steps": self._steps,
                "done": self._done}

    def set_state(self, state: dict[str, Any]) -> None:
        self._pos = np.asarray(state["pos"], dtype=np.float64).copy()
        self._vel = np.asarray(state["vel"], dtype=np.float64).copy()
        self._landmarks = np.asarray(state["landmarks"], dtype=np.float64).copy()
        self._steps = int(state["steps"])
        self._done = bool(state["done"])

    def observations(self) -> Array:
        return self._observations()

    def global_state(self) -> Array:
        return self._global_state()


ENV_IDS = ("hetero-grid", "homo-grid", "hetero-spread", "homo-spread")


def make_env(env_id: str, **params: Any) -> Env:
    """Instantiate an environment by id; extra params override defaults."""
    if env_id == "hetero-grid":
        return GridRescue(hetero=True, **params)
    if env_id == "homo-grid":
        return GridRescue(hetero=False, **params)
    if env_id == "hetero-spread":
        return Spread(hetero=True, **params)
    if env_id == "homo-spread":
        return Spread(hetero=False, **params)
    raise ValueError(f"unknown env id {env_id!r}; expected one of {ENV_IDS}")


def homogeneous_variant(env_id: str, **params: Any) -> Env:
    """Same dynamics, nearest-match reward: roles become interchangeable."""
    mapping = {"hetero-grid": "homo-grid", "hetero-spread": "homo-spread"}
    if env_id not in mapping:
        raise ValueError(f"no homogeneous variant for {env_id!r}")
    return make_env(mapping[env_id], **params)


class VecEnv:
    """Fixed-order batch of single-owner env instances with auto-reset.

    Each instance draws its episode seeds from its own RNG stream, so
    trajectories are reproducible regardless of how many instances run.
    Completed-episode returns are accumulated for training metrics.
    """

    def __init__(self, envs: list[Env], seed_streams: list[RngStream]) -> None:
        if len(envs) != len(seed_streams):
            raise ValueError("one seed stream per env instance required")
        self.envs = envs
        self.streams = seed_streams
        self.n_envs = len(envs)
        self._ep_return = np.zeros(self.n_envs)
        self._ep_len = np.zeros(self.n_envs, dtype=np.int64)
        self.completed: list[tuple[float, int, bool]] = []  # (return, length, success)

    def reset_all(self) -> tuple[Array, Array]:
        obs, states = [], []
        for env, stream in zip(self.envs, self.streams):
            o, s = env.reset(stream.next_seed())
            obs.append(o)
            states.append(s)
        self._ep_return[:] = 0.0
        self._ep_len[:] = 0
        return np.stack(obs), np.stack(states)

    def step(self, joint_actions: Array) -> tuple[Array, Array, Array, Array]:
        """Step every instance; finished episodes are reset in place.

        Returns (next_obs, next_state, rewards, dones); next_obs for a done
        env is the first observation of its fresh episode.
        """
        obs_out, state_out = [], []
        rewards = np.zeros(self.n_envs)
        dones = np.zeros(self.n_envs, dtype=bool)
        for w, env in enumerate(self.envs):
            o, s, r, done, info = env.step(joint_actions[w])
            rewards[w] = r
            dones[w] = done
            self._ep_return[w] += r
            self._ep_len[w] += 1
            if done:
                self.completed.append((float(self._ep_return[w]), int(self._ep_len[w]),
                                       bool(info.get("success", False))))
                self._ep_return[w] = 0.0
                self._ep_len[w] = 0
                o, s = env.reset(self.streams[w].next_seed())
            obs_out.append(o)
            state_out.append(s)
        return np.stack(obs_out), np.stack(state_out), rewards, dones

    def drain_completed(self) -> list[tuple[float, int, bool]]:
        done, self.completed = self.completed, []
        return done

    def get_state(self) -> dict[str, Any]:
        return {
            "envs": [env.get_state() for env in self.envs],
            "streams": [s.get_state() for s in self.streams],
            "ep_return": self._ep_return.copy(),
            "ep_len": self._ep_len.copy(),
        }

    def set_state(self, state: dict[str, Any]) -> None:
        for env, snap in zip(self.envs, state["envs"]):
            env.set_state(snap)
        for stream, snap in zip(self.streams, state["streams"]):
            stream.set_state(snap)
        self._ep_return = np.asarray(state["ep_return"], dtype=np.float64).copy()
        self._ep_len = np.asarray(state["ep_len"], dtype=np.int64).copy()
        self.completed = []

    def current_obs_state(self) -> tuple[Array, Array]:
        return (np.stack([env.observations() for env in self.envs]),
                np.stack([env.global_state() for env in self.envs]))
