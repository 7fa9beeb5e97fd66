"""Comparison methods: random assignment and trajectory clustering."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import InvalidArgument, one_hot


def random_assignment(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Each agent independently and uniformly assigned to one of ``k`` representatives."""
    if k > n:
        raise InvalidArgument(f"k={k} exceeds n={n}")
    return one_hot(rng.integers(0, k, size=n), k)


# -- K-means ----------------------------------------------------------------

@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    inertia: float
    n_iter: int = 0
    history: tuple = ()


def _sq_dists(points, centers):
    return ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)


def kmeans_plus_plus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = [points[rng.integers(n)]]
    closest = ((points - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        # all remaining points coincide with a center: pick uniformly
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=closest / total)
        centers.append(points[idx])
        closest = np.minimum(closest, ((points - points[idx]) ** 2).sum(axis=1))
    return np.array(centers, dtype=np.float64)


def lloyd(points: np.ndarray, centers: np.ndarray, max_iter: int = 300) -> KMeansResult:
    """Lloyd iterations from the given centers until labels stop changing.

    An empty cluster claims the point farthest from its own center.  When that
    distance is zero (all remaining points coincide) the cluster stays empty,
    since no split of duplicate points lowers the inertia.
    """
    points = np.asarray(points, dtype=np.float64)
    centers = np.array(centers, dtype=np.float64)
    k = centers.shape[0]
    labels = None
    history = []
    for it in range(1, max_iter + 1):
        d = _sq_dists(points, centers)
        new = np.argmin(d, axis=1)
        own = d[np.arange(len(points)), new]
        for c in range(k):
            if np.any(new == c):
                continue
            sizes = np.bincount(new, minlength=k)
            movable = sizes[new] > 1
            if not movable.any():
                break
            cand = np.where(movable, own, -1.0)
            p = int(np.argmax(cand))
            if cand[p] <= 0.0:
                break
            new[p] = c
            own[p] = 0.0
            centers[c] = points[p]
        history.append(float(((points - centers[new]) ** 2).sum()))
        for c in range(k):
            members = new == c
            if members.any():
                centers[c] = points[members].mean(axis=0)
        history.append(float(((points - centers[new]) ** 2).sum()))
        if labels is not None and np.array_equal(new, labels):
            labels = new
            break
        labels = new
    inertia = float(((points - centers[labels]) ** 2).sum())
    return KMeansResult(labels, centers, inertia, it, tuple(history))


def kmeans(points, k: int, rng: np.random.Generator, restarts: int = 10, max_iter: int = 300) -> KMeansResult:
    """K-means++ seeded Lloyd, best inertia over ``restarts`` runs."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise InvalidArgument("points must be an n x d matrix")
    if not 1 <= k <= points.shape[0]:
        raise InvalidArgument(f"need 1 <= k <= n, got k={k}, n={points.shape[0]}")
    best = None
    for _ in range(restarts):
        res = lloyd(points, kmeans_plus_plus(points, k, rng), max_iter)
        if best is None or res.inertia < best.inertia - 1e-12:
            best = res
    return best


def standardize_features(features) -> np.ndarray:
    """Column-wise z-scores with population std floored at 1e-8."""
    features = np.asarray(features, dtype=np.float64)
    return (features - features.mean(axis=0)) / np.maximum(features.std(axis=0), 1e-8)


# -- training pipelines -----------------------------------------------------

def pretrain_universal(env_config, seed: int = 0, transitions: int = 200_000, on_eval=None, **trainer_kw):
    """Train one policy on the equally weighted reward of all agents (the k = 1 path)."""
    from .algorithms import Trainer

    trainer = Trainer(env_config, 1, "fixed", seed, transitions_per_policy=transitions,
                      alpha=np.ones((env_config.n, 1)), **trainer_kw)
    trainer.run(on_eval)
    return trainer


def trajectory_features(trainer, episodes: int = 20) -> np.ndarray:
    """Per-agent undiscounted returns of the universal policy over ``episodes`` evaluation episodes."""
    from .algorithms import make_vec_env, episode_limit

    cfg = trainer.env_config
    vec = make_vec_env(cfg, episodes)
    raw = vec.reset()
    totals = np.zeros((episodes, trainer.n))
    live = np.ones(episodes, dtype=bool)
    model = trainer.model
    for _ in range(episode_limit(cfg)):
        o = model.normalizer(raw).astype(np.float32).reshape(1, episodes, -1)
        actions, _ = model.act(o, trainer.eval_rng, deterministic=trainer.eval_deterministic)
        a = actions.reshape(-1) if vec.discrete else model.env_actions(actions).reshape(episodes, -1)
        raw, rewards, dones = vec.step(a)
        totals[live] += rewards[live]
        live &= ~dones
        if not live.any():
            break
    return totals.T


def clustering_pipeline(env_config, k: int, seed: int = 0, transitions_per_policy: int = 200_000,
                        feature_episodes: int = 20, on_eval=None, **trainer_kw):
    """Universal policy -> return features -> K-means -> one policy per cluster.

    Returns ``(assignment, trainer)``; the assignment is never changed after
    clustering.  ``on_eval`` receives evaluation records of the cluster phase.
    """
    from .algorithms import Trainer, default_assignment

    n = env_config.n
    if k == 1 or k == n:
        trainer = Trainer(env_config, k, "fixed", seed, transitions_per_policy=transitions_per_policy,
                          alpha=default_assignment(n, k), **trainer_kw)
        trainer.run(on_eval)
        return trainer.alpha, trainer
    universal = pretrain_universal(env_config, seed, transitions_per_policy, **trainer_kw)
    feats = standardize_features(trajectory_features(universal, feature_episodes))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC1]))
    result = kmeans(feats, k, rng)
    alpha = one_hot(result.labels, k)
    trainer = Trainer(env_config, k, "fixed", seed, transitions_per_policy=transitions_per_policy,
                      alpha=alpha, **trainer_kw)
    trainer.run(on_eval)
    return alpha, trainer
