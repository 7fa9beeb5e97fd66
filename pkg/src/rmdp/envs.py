"""Built-in r-MDP environments and their exact oracles.

Resource Gathering: a 5x5 grid, one agent per tile.  The walker starts on
``start_cell``; the episode ends when it steps back onto the start cell (at
t >= 2) or at the time limit.  At termination each agent whose tile was
visited receives ``100 - T``.

Velocity tracking: a clamped 1-D integrator standing in for a locomotion task.
Agent ``i`` is paid ``(100 / H) * (1 - min(1, 20 |v_i - v| / b))`` per step.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .core import ContractViolation, InvalidArgument

UP, DOWN, LEFT, RIGHT = range(4)
MOVES = np.array([[-1, 0], [1, 0], [0, -1], [0, 1]])
ACTION_NAMES = ("up", "down", "left", "right")


# -- Resource Gathering -----------------------------------------------------

@dataclass(frozen=True)
class ResourceGatheringConfig:
    grid_side: int = 5
    start_cell: tuple[int, int] = (2, 0)
    time_limit: int = 100

    def __post_init__(self):
        r, c = self.start_cell
        if not (0 <= r < self.grid_side and 0 <= c < self.grid_side):
            raise InvalidArgument(f"start cell {self.start_cell} lies outside the grid")
        if self.time_limit < 2:
            raise InvalidArgument("time limit must allow leaving and returning")

    @property
    def n(self) -> int:
        return self.grid_side ** 2

    def tile(self, row: int, col: int) -> int:
        return row * self.grid_side + col


@dataclass
class GridState:
    position: tuple[int, int]
    visited: np.ndarray
    t: int = 0
    done: bool = False


def rg_initial_state(config: ResourceGatheringConfig) -> GridState:
    visited = np.zeros(config.n, dtype=bool)
    visited[config.tile(*config.start_cell)] = True
    return GridState(tuple(config.start_cell), visited, 0)


def rg_step(state: GridState, action: int, config: ResourceGatheringConfig = ResourceGatheringConfig()):
    """Advance one step; returns ``(next_state, rewards, done)``."""
    if state.done:
        raise ContractViolation("rg_step called on a terminated episode")
    if action not in range(4):
        raise InvalidArgument(f"invalid action {action!r}")
    side = config.grid_side
    r = min(max(state.position[0] + MOVES[action][0], 0), side - 1)
    c = min(max(state.position[1] + MOVES[action][1], 0), side - 1)
    visited = state.visited.copy()
    visited[config.tile(r, c)] = True
    t = state.t + 1
    done = ((r, c) == tuple(config.start_cell) and t >= 2) or t >= config.time_limit
    rewards = np.zeros(config.n)
    if done:
        rewards[visited] = 100.0 - t
    return GridState((int(r), int(c)), visited, t, done), rewards, done


def rg_observation(state: GridState, config: ResourceGatheringConfig) -> np.ndarray:
    obs = np.zeros(config.n + 1)
    obs[config.tile(*state.position)] = 1.0
    obs[-1] = state.t / config.time_limit
    return obs


class ResourceGathering:
    """Single-copy Resource Gathering environment."""

    discrete = True
    n_actions = 4

    def __init__(self, config: ResourceGatheringConfig = ResourceGatheringConfig()):
        self.config = config
        self.n = config.n
        self.obs_dim = config.n + 1
        self.state = None

    def reset(self, rng=None) -> np.ndarray:
        self.state = rg_initial_state(self.config)
        return rg_observation(self.state, self.config)

    def step(self, action):
        if self.state is None:
            raise ContractViolation("step before reset")
        self.state, rewards, done = rg_step(self.state, int(action), self.config)
        return rg_observation(self.state, self.config), rewards, done


class VecResourceGathering:
    """``num_envs`` lock-stepped copies with automatic reset on termination."""

    discrete = True
    n_actions = 4

    def __init__(self, num_envs: int, config: ResourceGatheringConfig = ResourceGatheringConfig()):
        self.config = config
        self.num_envs = num_envs
        self.n = config.n
        self.obs_dim = config.n + 1
        self._rows = np.arange(num_envs)
        self.reset()

    def reset(self, rng=None) -> np.ndarray:
        e = self.num_envs
        self.pos = np.tile(np.asarray(self.config.start_cell), (e, 1))
        self.visited = np.zeros((e, self.n), dtype=bool)
        self.visited[:, self.config.tile(*self.config.start_cell)] = True
        self.t = np.zeros(e, dtype=np.int64)
        return self.observe()

    def observe(self) -> np.ndarray:
        side = self.config.grid_side
        obs = np.zeros((self.num_envs, self.obs_dim))
        obs[self._rows, self.pos[:, 0] * side + self.pos[:, 1]] = 1.0
        obs[:, -1] = self.t / self.config.time_limit
        return obs

    def step(self, actions):
        """Returns ``(obs, rewards, dones)``; finished copies are reset in ``obs``."""
        cfg = self.config
        side = cfg.grid_side
        self.pos = np.clip(self.pos + MOVES[np.asarray(actions, dtype=np.int64)], 0, side - 1)
        self.visited[self._rows, self.pos[:, 0] * side + self.pos[:, 1]] = True
        self.t += 1
        at_start = (self.pos[:, 0] == cfg.start_cell[0]) & (self.pos[:, 1] == cfg.start_cell[1])
        dones = (at_start & (self.t >= 2)) | (self.t >= cfg.time_limit)
        rewards = np.zeros((self.num_envs, self.n))
        if dones.any():
            idx = np.flatnonzero(dones)
            rewards[idx] = self.visited[idx] * (100.0 - self.t[idx])[:, None]
            self.pos[idx] = cfg.start_cell
            self.visited[idx] = False
            self.visited[idx, cfg.tile(*cfg.start_cell)] = True
            self.t[idx] = 0
        return self.observe(), rewards, dones


def bfs_distances(config: ResourceGatheringConfig) -> np.ndarray:
    side = config.grid_side
    dist = np.full((side, side), -1, dtype=np.int64)
    dist[config.start_cell] = 0
    queue = deque([tuple(config.start_cell)])
    while queue:
        r, c = queue.popleft()
        for dr, dc in MOVES:
            rr, cc = r + dr, c + dc
            if 0 <= rr < side and 0 <= cc < side and dist[rr, cc] < 0:
                dist[rr, cc] = dist[r, c] + 1
                queue.append((rr, cc))
    return dist.reshape(-1)


def rg_optimal_oracle(config: ResourceGatheringConfig = ResourceGatheringConfig()):
    """Best return each agent gets from a dedicated policy, and their mean."""
    d = bfs_distances(config)
    # a return trip takes at least two steps, even for the start tile
    per_agent = 100.0 - 2.0 * np.maximum(d, 1)
    return per_agent, float(per_agent.mean())


def shortest_round_trip(config: ResourceGatheringConfig, tile: int) -> list[int]:
    """Action sequence of a minimal-length loop from the start through ``tile``."""
    side = config.grid_side
    sr, sc = config.start_cell
    tr, tc = divmod(tile, side)
    if (tr, tc) == (sr, sc):
        # bump into a wall twice if possible, otherwise step out and back
        for a in range(4):
            rr, cc = sr + MOVES[a][0], sc + MOVES[a][1]
            if not (0 <= rr < side and 0 <= cc < side):
                return [a, a]
        return [RIGHT, LEFT] if sc + 1 < side else [LEFT, RIGHT]
    vert = [DOWN if tr > sr else UP] * abs(tr - sr)
    horiz = [RIGHT if tc > sc else LEFT] * abs(tc - sc)
    back = {UP: DOWN, DOWN: UP, LEFT: RIGHT, RIGHT: LEFT}
    out = vert + horiz
    return out + [back[a] for a in reversed(out)]


# -- velocity tracking ------------------------------------------------------

@dataclass(frozen=True)
class VelocityTrackConfig:
    n: int = 100
    b: float = 4.0
    horizon: int = 200
    targets: tuple = field(default=())

    def __post_init__(self):
        if self.horizon < 1:
            raise InvalidArgument("horizon must be >= 1")
        if self.targets and len(self.targets) != self.n:
            raise InvalidArgument("need one target per agent")
        t = np.asarray(self.targets, dtype=np.float64)
        if t.size and (t.min() < 0 or t.max() > self.b):
            raise InvalidArgument("targets must lie in [0, b]")

    @property
    def accel_scale(self) -> float:
        return 0.1 * self.b

    @classmethod
    def sample(cls, n: int, b: float, rng: np.random.Generator, horizon: int = 200) -> "VelocityTrackConfig":
        return cls(n=n, b=b, horizon=horizon, targets=tuple(rng.uniform(0.0, b, size=n).tolist()))

    def target_array(self) -> np.ndarray:
        return np.asarray(self.targets, dtype=np.float64)


@dataclass
class VelState:
    v: float = 0.0
    t: int = 0


def velocity_kernel(targets, v, b: float) -> np.ndarray:
    """Triangular closeness score in [0, 1], zero beyond b / 20 of the target."""
    return 1.0 - np.minimum(1.0, 20.0 * np.abs(np.asarray(targets) - v) / b)


def vt_step(state: VelState, action: float, targets, b: float, horizon: int, accel_scale: float | None = None):
    accel_scale = 0.1 * b if accel_scale is None else accel_scale
    a = float(np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[0], -1.0, 1.0))
    v = float(np.clip(state.v + accel_scale * a, 0.0, b))
    t = state.t + 1
    rewards = (100.0 / horizon) * velocity_kernel(targets, v, b)
    return VelState(v, t), rewards, t >= horizon


class VelocityTrack:
    discrete = False
    action_dim = 1

    def __init__(self, config: VelocityTrackConfig):
        self.config = config
        self.n = config.n
        self.obs_dim = 2
        self.targets = config.target_array()
        self.state = None

    def _obs(self):
        return np.array([self.state.v / self.config.b, self.state.t / self.config.horizon])

    def reset(self, rng=None):
        self.state = VelState()
        return self._obs()

    def step(self, action):
        if self.state is None:
            raise ContractViolation("step before reset")
        if self.state.t >= self.config.horizon:
            raise ContractViolation("step after episode end")
        cfg = self.config
        self.state, rewards, done = vt_step(self.state, action, self.targets, cfg.b, cfg.horizon, cfg.accel_scale)
        return self._obs(), rewards, done


class VecVelocityTrack:
    discrete = False
    action_dim = 1

    def __init__(self, num_envs: int, config: VelocityTrackConfig):
        self.config = config
        self.num_envs = num_envs
        self.n = config.n
        self.obs_dim = 2
        self.targets = config.target_array()
        self.reset()

    def reset(self, rng=None):
        self.v = np.zeros(self.num_envs)
        self.t = np.zeros(self.num_envs, dtype=np.int64)
        return self.observe()

    def observe(self):
        return np.stack([self.v / self.config.b, self.t / self.config.horizon], axis=1)

    def step(self, actions):
        cfg = self.config
        a = np.clip(np.asarray(actions, dtype=np.float64).reshape(self.num_envs), -1.0, 1.0)
        self.v = np.clip(self.v + cfg.accel_scale * a, 0.0, cfg.b)
        self.t += 1
        rewards = (100.0 / cfg.horizon) * velocity_kernel(self.targets[None, :], self.v[:, None], cfg.b)
        dones = self.t >= cfg.horizon
        if dones.any():
            self.v[dones] = 0.0
            self.t[dones] = 0
        return self.observe(), rewards, dones


def vt_partition_oracle(targets, k: int, b: float, grid_points: int = 400):
    """Best welfare from splitting sorted targets into ``k`` contiguous groups.

    Each group is served by one constant velocity.  Candidates are a grid over
    ``[0, b]`` plus every kink of the kernel sum (each target and target +- b/20):
    a sum of triangular kernels is piecewise linear, so its maximum sits on a
    kink and the search is exact.  Returns ``(per-agent welfare, segment
    bounds)`` where bounds are ``(start, stop)`` index pairs into the sorted
    targets.
    """
    targets = np.sort(np.asarray(targets, dtype=np.float64))
    n = targets.size
    if k < 1 or k > n:
        raise InvalidArgument(f"need 1 <= k <= n, got k={k}, n={n}")
    kinks = np.concatenate([targets, targets - b / 20.0, targets + b / 20.0])
    grid = np.unique(np.concatenate([np.linspace(0.0, b, grid_points), np.clip(kinks, 0.0, b)]))
    kern = 100.0 * velocity_kernel(targets[None, :], grid[:, None], b)
    prefix = np.concatenate([np.zeros((grid.size, 1)), np.cumsum(kern, axis=1)], axis=1)
    # score[a, c] = best single-velocity payoff of sorted agents a..c-1
    score = np.full((n + 1, n + 1), -np.inf)
    for a in range(n):
        score[a, a + 1:] = (prefix[:, a + 1:] - prefix[:, [a]]).max(axis=0)
    best = np.full((k + 1, n + 1), -np.inf)
    arg = np.zeros((k + 1, n + 1), dtype=np.int64)
    best[0, 0] = 0.0
    for seg in range(1, k + 1):
        for c in range(seg, n + 1):
            cand = best[seg - 1, seg - 1:c] + score[seg - 1:c, c]
            a = int(np.argmax(cand))
            best[seg, c] = cand[a]
            arg[seg, c] = a + seg - 1
    bounds = []
    c = n
    for seg in range(k, 0, -1):
        a = arg[seg, c]
        bounds.append((int(a), int(c)))
        c = a
    return float(best[k, n] / n), bounds[::-1]
