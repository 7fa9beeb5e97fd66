"""Shared r-MDP abstractions: problem description, assignments, rollouts and welfare."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np


class RMdpError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgument(RMdpError, ValueError):
    pass


class ContractViolation(RMdpError, RuntimeError):
    pass


class EnvironmentFault(RMdpError, RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


class TrainingFault(RMdpError, RuntimeError):
    def __init__(self, message: str, representative: int | None = None):
        if representative is not None:
            message = f"{message} (representative {representative})"
        super().__init__(message)
        self.representative = representative


class NumericalFault(RMdpError, ArithmeticError):
    pass


class EnvId(str, enum.Enum):
    RESOURCE_GATHERING = "resource_gathering"
    VELOCITY_TRACK = "velocity_track"
    TABULAR = "tabular"


@dataclass(frozen=True)
class RMdpSpec:
    env_id: EnvId
    n: int
    k: int
    gamma: float = 0.99
    horizon: int = 100

    def __post_init__(self):
        object.__setattr__(self, "env_id", EnvId(self.env_id))
        if self.n < 1 or self.k < 1:
            raise InvalidArgument(f"n and k must be positive, got n={self.n}, k={self.k}")
        if self.k > self.n:
            raise InvalidArgument(f"budget k={self.k} exceeds number of agents n={self.n}")
        if not 0.0 < self.gamma < 1.0:
            raise InvalidArgument(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.horizon < 1:
            raise InvalidArgument(f"horizon must be positive, got {self.horizon}")

    @property
    def learns_assignment(self) -> bool:
        # k == 1 and k == n leave nothing to assign
        return 1 < self.k < self.n


# -- assignments ------------------------------------------------------------

def check_assignment(alpha, n: int | None = None, k: int | None = None, atol: float = 1e-6) -> np.ndarray:
    """Validate a row-stochastic n x k matrix and return it as float64."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim != 2:
        raise InvalidArgument(f"assignment must be 2-D, got shape {alpha.shape}")
    if n is not None and alpha.shape[0] != n or k is not None and alpha.shape[1] != k:
        raise InvalidArgument(f"assignment shape {alpha.shape} does not match ({n}, {k})")
    if np.any(alpha < -atol) or np.any(alpha > 1 + atol):
        raise InvalidArgument("assignment entries must lie in [0, 1]")
    if not np.allclose(alpha.sum(axis=1), 1.0, atol=atol):
        raise InvalidArgument("assignment rows must sum to 1")
    return alpha


def is_hard(alpha) -> bool:
    alpha = np.asarray(alpha)
    return bool(np.all((alpha == 0.0) | (alpha == 1.0)) and np.all(alpha.sum(axis=1) == 1.0))


def one_hot(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, k))
    out[np.arange(labels.size), labels] = 1.0
    return out


def harden(alpha) -> np.ndarray:
    """Row-wise argmax of an assignment; ties go to the lowest index."""
    alpha = np.asarray(alpha, dtype=np.float64)
    return one_hot(np.argmax(alpha, axis=1), alpha.shape[1])


def social_welfare(alpha, value_table) -> float:
    """Mean per-agent welfare sum_ij alpha[i, j] * V[i, j] / n."""
    alpha = np.asarray(alpha, dtype=np.float64)
    value_table = np.asarray(value_table, dtype=np.float64)
    if alpha.shape != value_table.shape or alpha.ndim != 2:
        raise InvalidArgument(f"alpha {alpha.shape} and value table {value_table.shape} must be equal n x k")
    if not np.all(np.isfinite(value_table)):
        raise InvalidArgument("value table contains non-finite entries")
    check_assignment(alpha)
    return float(np.sum(alpha * value_table) / alpha.shape[0])


# -- trajectories -----------------------------------------------------------

@dataclass
class Transition:
    state: np.ndarray
    action: int | np.ndarray
    rewards: np.ndarray
    next_state: np.ndarray
    done: bool
    log_prob: float
    value_estimates: np.ndarray


@dataclass
class TrajectoryBatch:
    representative_id: int
    transitions: list[Transition] = field(default_factory=list)
    # index of the first transition of every episode
    episode_boundaries: list[int] = field(default_factory=list)

    def __len__(self):
        return len(self.transitions)

    def episode_returns(self) -> np.ndarray:
        """Undiscounted per-agent returns of completed episodes, shape (episodes, n)."""
        out, acc = [], None
        for tr in self.transitions:
            acc = tr.rewards.copy() if acc is None else acc + tr.rewards
            if tr.done:
                out.append(acc)
                acc = None
        if not out:
            return np.zeros((0, len(self.transitions[0].rewards) if self.transitions else 0))
        return np.stack(out)


class Env(Protocol):
    n: int

    def reset(self, rng: np.random.Generator) -> np.ndarray: ...

    def step(self, action) -> tuple[np.ndarray, np.ndarray, bool]: ...


class Policy(Protocol):
    def act(self, obs: np.ndarray, rng: np.random.Generator) -> tuple: ...


def _unpack_act(out, n):
    if len(out) == 3:
        action, log_prob, values = out
    else:
        action, log_prob = out
        values = None
    values = np.zeros(n) if values is None else np.asarray(values, dtype=np.float64)
    return action, float(log_prob), values


def rollout(env: Env, policy: Policy, rng: np.random.Generator, max_steps: int,
            representative_id: int = 0) -> TrajectoryBatch:
    """Collect exactly ``max_steps`` transitions, restarting episodes on termination.

    ``policy.act(obs, rng)`` returns ``(action, log_prob)`` or
    ``(action, log_prob, value_estimates)``.
    """
    if max_steps < 1:
        raise InvalidArgument("max_steps must be positive")
    batch = TrajectoryBatch(representative_id)
    obs = np.asarray(env.reset(rng), dtype=np.float64)
    batch.episode_boundaries.append(0)
    for step in range(max_steps):
        if not np.all(np.isfinite(obs)):
            raise EnvironmentFault("non-finite observation", step)
        action, log_prob, values = _unpack_act(policy.act(obs, rng), env.n)
        next_obs, rewards, done = env.step(action)
        rewards = np.asarray(rewards, dtype=np.float64)
        next_obs = np.asarray(next_obs, dtype=np.float64)
        if rewards.shape != (env.n,):
            raise EnvironmentFault(f"reward vector has shape {rewards.shape}, expected ({env.n},)", step)
        if not np.all(np.isfinite(rewards)):
            raise EnvironmentFault("non-finite reward", step)
        if not np.isfinite(log_prob):
            raise EnvironmentFault("non-finite log-probability", step)
        batch.transitions.append(Transition(obs, action, rewards, next_obs, bool(done), log_prob, values))
        if done:
            if step + 1 < max_steps:
                obs = np.asarray(env.reset(rng), dtype=np.float64)
                batch.episode_boundaries.append(step + 1)
        else:
            obs = next_obs
    return batch


def run_episode(env: Env, policy: Policy, rng: np.random.Generator, max_steps: int = 100_000) -> np.ndarray:
    """Undiscounted per-agent return of one full episode."""
    obs = env.reset(rng)
    total = np.zeros(env.n)
    for step in range(max_steps):
        action = _unpack_act(policy.act(np.asarray(obs, dtype=np.float64), rng), env.n)[0]
        obs, rewards, done = env.step(action)
        rewards = np.asarray(rewards, dtype=np.float64)
        if not np.all(np.isfinite(rewards)):
            raise EnvironmentFault("non-finite reward", step)
        total += rewards
        if done:
            return total
    raise EnvironmentFault("episode did not terminate", max_steps)


def evaluate(env_factory: Callable[[], Env], policies: Sequence[Policy], alpha,
             episodes: int, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Monte-Carlo value table V[i, j] (mean undiscounted return) and hardened welfare."""
    if episodes < 1:
        raise InvalidArgument("episodes must be >= 1")
    alpha = np.asarray(alpha, dtype=np.float64)
    k = len(policies)
    value_table = None
    for j, policy in enumerate(policies):
        env = env_factory()
        returns = np.mean([run_episode(env, policy, rng) for _ in range(episodes)], axis=0)
        if value_table is None:
            value_table = np.zeros((len(returns), k))
        value_table[:, j] = returns
    return value_table, social_welfare(harden(alpha), value_table)
