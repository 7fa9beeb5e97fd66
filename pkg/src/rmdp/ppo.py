"""PPO for k representatives with per-agent critics.

The critic of representative ``j`` predicts one value per agent, so every
agent's advantage stream can be estimated regardless of the assignment.  The
actor of ``j`` is trained on the assignment-weighted ("marginal") advantage.
Actors share a trunk, and so do critics; all representatives are updated in a
single batched pass per minibatch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import InvalidArgument, TrainingFault
from .nn import (AdamState, Categorical, DenseNet, DiagGaussian, ObsNormalizer, adam_step,
                 clip_action, clip_grad_norm, LOG_STD_MAX, LOG_STD_MIN)


@dataclass
class PpoConfig:
    lr_start: float = 3e-4
    lr_end: float = 1e-4
    entropy_coef: float = 0.001
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    batch_size: int = 2048
    minibatch_size: int = 64
    epochs: int = 10
    grad_clip_norm: float = 0.5
    gamma: float = 0.99
    hidden: tuple = (64,)

    def __post_init__(self):
        if self.batch_size % self.minibatch_size:
            raise InvalidArgument("batch_size must be divisible by minibatch_size")
        if not 0.0 < self.gamma < 1.0:
            raise InvalidArgument("gamma must lie in (0, 1)")

    def lr_at(self, progress: float) -> float:
        """Linearly annealed learning rate, ``progress`` in [0, 1]."""
        progress = min(max(progress, 0.0), 1.0)
        return self.lr_start + (self.lr_end - self.lr_start) * progress


def compute_gae(rewards, values, dones, gamma: float, lam: float, last_values=None):
    """GAE(lambda) along axis 0; trailing axes are independent streams.

    ``values[t]`` estimates the state at step ``t``; ``last_values`` bootstraps
    the state after the final step and is ignored where that step is terminal.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if rewards.shape != values.shape:
        raise InvalidArgument(f"rewards {rewards.shape} and values {values.shape} differ")
    while dones.ndim < rewards.ndim:
        dones = dones[..., None]
    next_value = np.zeros(rewards.shape[1:]) if last_values is None else np.asarray(last_values, dtype=np.float64)
    adv = np.zeros_like(rewards)
    gae = np.zeros(rewards.shape[1:])
    for t in range(rewards.shape[0] - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        gae = delta + gamma * lam * live * gae
        adv[t] = gae
        next_value = values[t]
    return adv, adv + values


def critic_loss(predictions, targets):
    """Mean squared error over (transition, agent) and its gradient."""
    diff = np.asarray(predictions, dtype=np.float64) - np.asarray(targets, dtype=np.float64)
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


def marginal_advantage(adv, alpha_column, normalize: bool = True):
    """Assignment-weighted advantage of one representative, or None if it has no mass."""
    alpha_column = np.asarray(alpha_column, dtype=np.float64)
    if np.any(alpha_column < 0) or np.any(alpha_column > 1 + 1e-9):
        raise InvalidArgument("assignment column entries must lie in [0, 1]")
    if not np.any(alpha_column > 0):
        return None
    out = np.asarray(adv, dtype=np.float64) @ alpha_column
    if normalize:
        out = out - out.mean()
        std = out.std()
        if std > 1e-8:
            out = out / std
    return out


def actor_loss(ratios, advantages, clip_eps: float, entropy=None, entropy_coef: float = 0.0):
    """Negated clipped surrogate plus entropy bonus.

    Returns ``(loss, dloss/dratio, dloss/dentropy)`` with gradients per element.
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    advantages = np.asarray(advantages, dtype=np.float64)
    m = ratios.size
    unclipped = ratios * advantages
    clipped = np.clip(ratios, 1.0 - clip_eps, 1.0 + clip_eps) * advantages
    loss = -np.mean(np.minimum(unclipped, clipped))
    grad_ratio = np.where(unclipped <= clipped, -advantages, 0.0) / m
    grad_entropy = np.zeros_like(ratios)
    if entropy is not None:
        loss -= entropy_coef * float(np.mean(entropy))
        grad_entropy = np.full(ratios.shape, -entropy_coef / m)
    return float(loss), grad_ratio, grad_entropy


def clipped_surrogate(ratios, advantages, clip_eps: float):
    """Elementwise ``-min(r A, clip(r) A)`` and its derivative in ``r`` (no averaging)."""
    unclipped = ratios * advantages
    clipped = np.clip(ratios, 1.0 - clip_eps, 1.0 + clip_eps) * advantages
    return -np.minimum(unclipped, clipped), np.where(unclipped <= clipped, -advantages, 0.0)


class ActorCritic:
    """Shared-trunk actors (one head per representative) and per-agent critics."""

    def __init__(self, obs_dim: int, n: int, k: int, discrete: bool, n_actions: int = 4,
                 action_dim: int = 1, hidden=(64,), rng: np.random.Generator | None = None,
                 dtype=np.float32):
        rng = np.random.default_rng(0) if rng is None else rng
        self.obs_dim, self.n, self.k = obs_dim, n, k
        self.discrete = discrete
        self.n_actions, self.action_dim = n_actions, action_dim
        out = n_actions if discrete else action_dim
        extra = None if discrete else {"log_std": (k, action_dim)}
        self.actor = DenseNet(obs_dim, out, heads=k, hidden=hidden, rng=rng, head_gain=0.01, dtype=dtype,
                              extra_params=extra)
        self.critic = DenseNet(obs_dim, n, heads=k, hidden=hidden, rng=rng, head_gain=1.0, dtype=dtype)
        self.normalizer = ObsNormalizer(obs_dim)
        self.actor_adam = AdamState({"flat": self.actor.flat_params})
        self.critic_adam = AdamState({"flat": self.critic.flat_params})

    @property
    def log_std(self):
        return None if self.discrete else self.actor.params["log_std"]

    def distribution(self, head_out, heads_axis: bool = True):
        if self.discrete:
            return Categorical(head_out)
        log_std = self.log_std[:, None, :] if heads_axis else self.log_std
        return DiagGaussian(head_out, log_std)

    def act(self, obs, rng: np.random.Generator, deterministic: bool = False):
        """Actions and log-probs for normalised observations of shape ``(k, batch, obs_dim)``."""
        dist = self.distribution(self.actor.predict_heads(obs).astype(np.float64))
        actions = dist.mode() if deterministic else dist.sample(rng)
        return actions, dist.log_prob(actions)

    def env_actions(self, actions):
        return actions if self.discrete else clip_action(actions)

    def values(self, obs) -> np.ndarray:
        return self.critic.predict_heads(obs).astype(np.float64)

    def step_actor(self, lr: float, max_norm: float):
        clip_grad_norm([{"flat": self.actor.flat_grads}], max_norm)
        adam_step({"flat": self.actor.flat_params}, {"flat": self.actor.flat_grads}, self.actor_adam, lr)

    def step_critic(self, lr: float, max_norm: float):
        clip_grad_norm([{"flat": self.critic.flat_grads}], max_norm)
        adam_step({"flat": self.critic.flat_params}, {"flat": self.critic.flat_grads}, self.critic_adam, lr)

    def state_dict(self) -> dict:
        out = self.actor.state_dict("actor.")
        out.update(self.critic.state_dict("critic."))
        out.update(self.normalizer.state_dict())
        return out

    def load_state_dict(self, tensors):
        self.actor.load_state_dict(tensors, "actor.")
        self.critic.load_state_dict(tensors, "critic.")
        self.normalizer.load_state_dict(tensors)


@dataclass
class RolloutData:
    """One batch per representative, grouped along the leading axis."""
    obs: np.ndarray        # (k, B, obs_dim) normalised
    actions: np.ndarray    # (k, B) or (k, B, action_dim), unclipped
    log_probs: np.ndarray  # (k, B)
    advantages: np.ndarray  # (k, B, n)
    targets: np.ndarray    # (k, B, n)


@dataclass
class UpdateMetrics:
    actor_loss: float = 0.0
    critic_loss: float = 0.0
    approx_kl: float = 0.0
    entropy: float = 0.0
    skipped: list = field(default_factory=list)


def actor_backward(model: ActorCritic, obs, actions, old_log_probs, marginal, active, clip_eps: float,
                   entropy_coef: float):
    """Accumulate actor gradients for a grouped minibatch.

    Every head's loss is the mean clipped surrogate over its own rows minus the
    entropy bonus; heads flagged inactive contribute nothing.  Returns
    ``(loss per head, ratios, entropy)``.
    """
    k, m = old_log_probs.shape
    dist = model.distribution(model.actor.forward_heads(obs).astype(np.float64))
    logp = dist.log_prob(actions)
    ratios = np.exp(logp - old_log_probs)
    entropy = dist.entropy()
    surr, g_ratio = clipped_surrogate(ratios, marginal, clip_eps)
    losses = surr.mean(axis=1) - entropy_coef * entropy.mean(axis=1)
    bad = active & ~np.isfinite(losses)
    if bad.any():
        raise TrainingFault("non-finite actor loss", int(np.flatnonzero(bad)[0]))
    scale = active[:, None] / m
    g_logp = g_ratio * ratios * scale
    g_ent = -entropy_coef * np.broadcast_to(scale, (k, m))
    if model.discrete:
        upstream = dist.grad_log_prob(actions) * g_logp[..., None] + dist.grad_entropy() * g_ent[..., None]
    else:
        d_mean, d_logstd = dist.grad_log_prob(actions)
        upstream = d_mean * g_logp[..., None]
        g_std = model.actor.grads["log_std"]
        g_std += (d_logstd * g_logp[..., None]).sum(axis=1) + g_ent.sum(axis=1)[:, None]
        # clamped log-std receives no gradient at the bounds
        g_std[(model.log_std <= LOG_STD_MIN) | (model.log_std >= LOG_STD_MAX)] = 0.0
    model.actor.backward(upstream)
    return np.where(active, losses, 0.0), ratios, entropy


def critic_backward(model: ActorCritic, obs, targets):
    """Accumulate critic gradients; returns the per-head mean squared error."""
    k, m, n = targets.shape
    diff = model.critic.forward_heads(obs).astype(np.float64) - targets
    losses = np.mean(diff ** 2, axis=(1, 2))
    if not np.all(np.isfinite(losses)):
        raise TrainingFault("non-finite critic loss", int(np.argmin(np.isfinite(losses))))
    model.critic.backward(2.0 * diff / (m * n))
    return losses


def ppo_update(data: RolloutData, model: ActorCritic, alpha, config: PpoConfig, rng: np.random.Generator,
               lr: float, logits=None) -> UpdateMetrics:
    """One PPO update of every representative on its fresh batch.

    ``logits`` (an ``AssignmentLogits``) is stepped on every minibatch when the
    assignment is learned end to end; ``alpha`` is then the soft assignment
    at the start of the update.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    k, batch, n = data.advantages.shape
    if alpha.shape != (n, k):
        raise InvalidArgument(f"alpha shape {alpha.shape} != ({n}, {k})")
    marginal = np.zeros((k, batch))
    active = np.zeros(k, dtype=bool)
    metrics = UpdateMetrics()
    for j in range(k):
        mj = marginal_advantage(data.advantages[j], alpha[:, j])
        if mj is None:
            metrics.skipped.append(j)
            continue
        marginal[j] = mj
        active[j] = True

    mb = config.minibatch_size
    steps = 0
    for _ in range(config.epochs):
        perm = np.argsort(rng.random((k, batch)), axis=1)
        rows = np.arange(k)[:, None]

        def shuffled(x):
            return x[rows, perm]

        obs_e, act_e, old_e = shuffled(data.obs), shuffled(data.actions), shuffled(data.log_probs)
        adv_e, tgt_e, marg_e = shuffled(data.advantages), shuffled(data.targets), shuffled(marginal)
        for start in range(0, batch, mb):
            sl = slice(start, start + mb)
            obs = obs_e[:, sl]
            model.actor.zero_grad()
            losses, ratios, entropy = actor_backward(model, obs, act_e[:, sl], old_e[:, sl], marg_e[:, sl],
                                                     active, config.clip_eps, config.entropy_coef)
            if active.any():
                model.step_actor(lr, config.grad_clip_norm)

            model.critic.zero_grad()
            c_loss = critic_backward(model, obs, tgt_e[:, sl])
            model.step_critic(lr, config.grad_clip_norm)

            if logits is not None:
                logits.step(np.clip(ratios, 1.0 - config.clip_eps, 1.0 + config.clip_eps), adv_e[:, sl])

            if active.any():
                log_ratio = np.log(ratios[active])
                metrics.approx_kl += float(np.mean(np.exp(log_ratio) - 1.0 - log_ratio))
            metrics.actor_loss += float(losses.sum())
            metrics.critic_loss += float(c_loss.sum())
            metrics.entropy += float(np.mean(entropy))
            steps += 1
    if steps:
        metrics.actor_loss /= steps
        metrics.critic_loss /= steps
        metrics.approx_kl /= steps
        metrics.entropy /= steps
    return metrics
