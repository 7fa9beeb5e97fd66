"""Training loop shared by the EM, end-to-end, random and fixed-assignment learners.

Every update round each representative collects its own batch from
``num_envs`` lock-stepped environment copies; one environment step yields the
reward of every agent, which feeds the per-agent critics and the Q-table.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .assign import AssignmentLogits, QTable, e_step, initial_hard_assignment
from .core import InvalidArgument, harden, social_welfare
from .envs import (ResourceGathering, ResourceGatheringConfig, VecResourceGathering, VecVelocityTrack,
                   VelocityTrack, VelocityTrackConfig)
from .ppo import ActorCritic, PpoConfig, RolloutData, UpdateMetrics, compute_gae, ppo_update

log = logging.getLogger(__name__)

ALGORITHMS = ("em", "end_to_end", "random", "fixed")


def make_env(config):
    if isinstance(config, ResourceGatheringConfig):
        return ResourceGathering(config)
    if isinstance(config, VelocityTrackConfig):
        return VelocityTrack(config)
    raise InvalidArgument(f"unknown environment config {type(config).__name__}")


def make_vec_env(config, num_envs: int):
    if isinstance(config, ResourceGatheringConfig):
        return VecResourceGathering(num_envs, config)
    if isinstance(config, VelocityTrackConfig):
        return VecVelocityTrack(num_envs, config)
    raise InvalidArgument(f"unknown environment config {type(config).__name__}")


def episode_limit(config) -> int:
    return config.time_limit if isinstance(config, ResourceGatheringConfig) else config.horizon


def default_assignment(n: int, k: int) -> np.ndarray:
    """The assignment used when there is nothing to learn (k = 1 or k = n)."""
    if k == 1:
        return np.ones((n, 1))
    if k == n:
        return np.eye(n)
    raise InvalidArgument("a default assignment exists only for k = 1 or k = n")


@dataclass
class EvalRecord:
    round: int
    transitions_per_policy: int
    social_welfare: float
    counts: list


@dataclass
class TrainResult:
    alpha: np.ndarray
    value_table: np.ndarray
    social_welfare: float
    records: list = field(default_factory=list)


class Trainer:
    def __init__(self, env_config, k: int, algorithm: str = "em", seed: int = 0,
                 ppo: PpoConfig | None = None, transitions_per_policy: int = 200_000,
                 num_envs: int = 8, eval_every: int = 10, eval_episodes: int = 10,
                 q_mixing: float = 0.05, psi_lr: float = 0.002, alpha=None,
                 eval_deterministic: bool = True):
        if algorithm not in ALGORITHMS:
            raise InvalidArgument(f"unknown algorithm {algorithm!r}")
        self.env_config = env_config
        self.n = env_config.n
        self.k = k
        if not 1 <= k <= self.n:
            raise InvalidArgument(f"need 1 <= k <= n, got k={k}, n={self.n}")
        self.algorithm = algorithm
        self.seed = seed
        self.ppo = ppo or PpoConfig()
        if self.ppo.batch_size % num_envs:
            raise InvalidArgument("batch_size must be divisible by num_envs")
        self.num_envs = num_envs
        self.steps_per_round = self.ppo.batch_size // num_envs
        self.total_rounds = transitions_per_policy // self.ppo.batch_size
        self.eval_every = eval_every
        self.eval_episodes = eval_episodes
        self.eval_deterministic = eval_deterministic

        streams = np.random.SeedSequence(seed).spawn(5)
        init_rng, self.rollout_rng, self.update_rng, self.eval_rng, assign_rng = (
            np.random.default_rng(s) for s in streams)

        vec = make_vec_env(env_config, k * num_envs)
        self.vec = vec
        self.model = ActorCritic(vec.obs_dim, self.n, k, vec.discrete,
                                 n_actions=getattr(vec, "n_actions", 4),
                                 action_dim=getattr(vec, "action_dim", 1),
                                 hidden=self.ppo.hidden, rng=init_rng)
        self.obs = vec.reset()
        self.q_table = None
        self.logits = None
        self.learns = 1 < k < self.n and algorithm in ("em", "end_to_end")
        if alpha is not None:
            self.alpha = np.asarray(alpha, dtype=np.float64)
            if self.alpha.shape != (self.n, k):
                raise InvalidArgument(f"alpha shape {self.alpha.shape} != ({self.n}, {k})")
            self.learns = False
        elif not 1 < k < self.n:
            self.alpha = default_assignment(self.n, k)
        elif algorithm == "em":
            self.alpha = initial_hard_assignment(self.n, k, assign_rng)
            self.q_table = QTable(self.n, k, q_mixing)
        elif algorithm == "end_to_end":
            self.logits = AssignmentLogits(self.n, k, psi_lr)
            self.alpha = self.logits.alpha
        elif algorithm == "random":
            from .baselines import random_assignment
            self.alpha = random_assignment(self.n, k, assign_rng)
        else:
            raise InvalidArgument("the fixed algorithm needs an explicit alpha")
        self.round = 0
        self.last_metrics: UpdateMetrics | None = None

    # -- data collection ----------------------------------------------------

    def collect(self):
        """Roll every representative for one batch; returns data and finished-episode returns."""
        k, m, n = self.k, self.num_envs, self.n
        steps = self.steps_per_round
        model = self.model
        obs_buf = np.zeros((steps, k, m, self.vec.obs_dim), dtype=np.float32)
        act_shape = (steps, k, m) if self.vec.discrete else (steps, k, m, self.vec.action_dim)
        act_buf = np.zeros(act_shape, dtype=np.int64 if self.vec.discrete else np.float64)
        logp_buf = np.zeros((steps, k, m))
        rew_buf = np.zeros((steps, k, m, n))
        done_buf = np.zeros((steps, k, m), dtype=bool)
        running = getattr(self, "_running_returns", None)
        if running is None:
            running = np.zeros((k * m, n))
        finished = [[] for _ in range(k)]
        raw = self.obs
        for t in range(steps):
            model.normalizer.update(raw)
            o = model.normalizer(raw).astype(np.float32).reshape(k, m, -1)
            actions, logp = model.act(o, self.rollout_rng)
            raw, rewards, dones = self.vec.step(model.env_actions(actions).reshape(k * m, -1)
                                                if not self.vec.discrete else actions.reshape(-1))
            obs_buf[t] = o
            act_buf[t] = actions
            logp_buf[t] = logp
            rew_buf[t] = rewards.reshape(k, m, n)
            done_buf[t] = dones.reshape(k, m)
            running += rewards
            if dones.any():
                for e in np.flatnonzero(dones):
                    finished[e // m].append(running[e].copy())
                running[dones] = 0.0
        self.obs = raw
        self._running_returns = running
        last = model.normalizer(raw).astype(np.float32).reshape(k, m, -1)

        # values for every stored state plus the bootstrap state
        flat = obs_buf.transpose(1, 2, 0, 3).reshape(k, m * steps, -1)
        values = model.values(flat).reshape(k, m, steps, n).transpose(2, 0, 1, 3)
        last_values = model.values(last)
        adv, targets = compute_gae(rew_buf, values, done_buf, self.ppo.gamma, self.ppo.gae_lambda, last_values)

        def group(x):
            x = np.moveaxis(x, 0, 2)  # (k, m, steps, ...)
            return x.reshape((k, m * steps) + x.shape[3:])

        data = RolloutData(group(obs_buf), group(act_buf), group(logp_buf), group(adv), group(targets))
        returns = [np.array(f).reshape(-1, n) for f in finished]
        return data, returns

    # -- one update round -----------------------------------------------------

    def train_round(self):
        data, returns = self.collect()
        progress = self.round / max(1, self.total_rounds - 1)
        lr = self.ppo.lr_at(progress)
        logits = self.logits if self.learns and self.algorithm == "end_to_end" else None
        self.last_metrics = ppo_update(data, self.model, self.alpha, self.ppo, self.update_rng, lr, logits)
        if self.learns and self.algorithm == "em":
            for j, r in enumerate(returns):
                self.q_table.update_episodes(j, r)
            self.alpha = e_step(self.q_table)
        elif logits is not None:
            self.alpha = logits.alpha
        self.round += 1
        return self.last_metrics

    # -- evaluation -----------------------------------------------------------

    def value_table(self, episodes: int | None = None, deterministic: bool | None = None) -> np.ndarray:
        """Mean undiscounted return of agent ``i`` under policy ``j`` over fresh episodes."""
        episodes = self.eval_episodes if episodes is None else episodes
        deterministic = self.eval_deterministic if deterministic is None else deterministic
        k, n = self.k, self.n
        vec = make_vec_env(self.env_config, k * episodes)
        raw = vec.reset()
        totals = np.zeros((k * episodes, n))
        live = np.ones(k * episodes, dtype=bool)
        for _ in range(episode_limit(self.env_config)):
            o = self.model.normalizer(raw).astype(np.float32).reshape(k, episodes, -1)
            actions, _ = self.model.act(o, self.eval_rng, deterministic=deterministic)
            a = actions.reshape(-1) if vec.discrete else self.model.env_actions(actions).reshape(k * episodes, -1)
            raw, rewards, dones = vec.step(a)
            totals[live] += rewards[live]
            live &= ~dones
            if not live.any():
                break
        return totals.reshape(k, episodes, n).mean(axis=1).T

    def evaluate(self) -> tuple[np.ndarray, float]:
        vt = self.value_table()
        return vt, social_welfare(harden(self.alpha), vt)

    def policy(self, j: int, deterministic: bool = True):
        """Single-environment view of representative ``j`` (for ``core.rollout``/``core.evaluate``)."""
        return _HeadPolicy(self.model, j, deterministic)

    # -- driver ---------------------------------------------------------------

    def run(self, on_eval: Callable[[EvalRecord], None] | None = None) -> TrainResult:
        records = []

        def record():
            vt, sw = self.evaluate()
            counts = harden(self.alpha).sum(axis=0).astype(int).tolist()
            rec = EvalRecord(self.round, self.round * self.ppo.batch_size, sw, counts)
            records.append(rec)
            if on_eval:
                on_eval(rec)
            return vt, sw

        vt, sw = record()
        while self.round < self.total_rounds:
            self.train_round()
            if self.round % self.eval_every == 0 or self.round == self.total_rounds:
                vt, sw = record()
                log.debug("round %d sw %.3f", self.round, sw)
        return TrainResult(self.alpha.copy(), vt, sw, records)


class _HeadPolicy:
    def __init__(self, model: ActorCritic, head: int, deterministic: bool):
        self.model, self.head, self.deterministic = model, head, deterministic

    def act(self, obs, rng):
        o = self.model.normalizer(obs).astype(np.float32)
        out = self.model.actor.forward(o, self.head).astype(np.float64)
        if self.model.discrete:
            from .nn import Categorical
            dist = Categorical(out)
        else:
            from .nn import DiagGaussian
            dist = DiagGaussian(out, self.model.log_std[self.head])
        a = dist.mode() if self.deterministic else dist.sample(rng)
        logp = float(dist.log_prob(a))
        a = int(a) if self.model.discrete else self.model.env_actions(a)
        return a, logp
