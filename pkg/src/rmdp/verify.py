"""Structural self-checks: exact tabular EM, numerical kernels and oracles.

``run_checks`` returns one ``Check`` per criterion with the measured value and
its threshold; nothing here trains a deep policy, so the suite finishes in
well under a minute.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass

import numpy as np

from .assign import initial_hard_assignment, soft_alpha, soft_logits_grad
from .baselines import kmeans_plus_plus, lloyd
from .envs import ResourceGatheringConfig, rg_optimal_oracle
from .nn import orthogonal_init
from .ppo import ActorCritic, actor_backward, compute_gae, critic_backward
from .tabular import (em_solve, is_fixed_point, policy_values, random_instance, trace_is_monotone,
                      weighted_reward)

GRAD_TOL = 1e-3


@dataclass
class Check:
    name: str
    measured: float
    threshold: float
    passed: bool
    detail: str = ""


# -- tabular ----------------------------------------------------------------------

def random_tabular_case(seed: int):
    """A seeded instance within |S| <= 6, |A| <= 3, n <= 8, k <= 3 and an initial assignment."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 9))
    k = int(rng.integers(1, min(3, n) + 1))
    rmdp = random_instance(rng, int(rng.integers(1, 7)), int(rng.integers(1, 4)), n)
    return rmdp, initial_hard_assignment(n, k, rng)


def em_suite(instances: int = 200, max_iters: int = 50, tol: float = 1e-9) -> tuple[int, list]:
    """Count instances whose EM trace is monotone, converges and ends at a fixed point."""
    ok, failures = 0, []
    for seed in range(instances):
        rmdp, alpha = random_tabular_case(seed)
        res = em_solve(rmdp, alpha, max_iters)
        if res.converged and trace_is_monotone(res.sw_trace, tol) and is_fixed_point(rmdp, res):
            ok += 1
        else:
            failures.append(seed)
    return ok, failures


def value_function_identity(cases: int = 100) -> float:
    """Largest gap between the value under the weighted reward and the weighted per-agent values."""
    worst = 0.0
    for seed in range(cases):
        rng = np.random.default_rng(10_000 + seed)
        n = int(rng.integers(1, 9))
        rmdp = random_instance(rng, int(rng.integers(1, 7)), int(rng.integers(1, 4)), n)
        policy = rng.dirichlet(np.ones(rmdp.n_actions), size=rmdp.n_states)
        column = rng.uniform(0.0, 1.0, size=n)
        direct = policy_values(rmdp, policy, weighted_reward(rmdp, column))
        per_agent = policy_values(rmdp, policy, rmdp.rewards)
        worst = max(worst, float(np.max(np.abs(direct - column @ per_agent))))
    return worst


# -- numerical kernels ----------------------------------------------------------------

def gae_brute_force(rewards, values, dones, gamma, lam, last_value):
    """Advantages as explicit lambda-weighted sums of TD residuals (single stream)."""
    T = len(rewards)
    nxt = np.append(values[1:], last_value)
    delta = rewards + gamma * nxt * (1.0 - dones) - values
    adv = np.zeros(T)
    for t in range(T):
        weight = 1.0
        for u in range(t, T):
            adv[t] += weight * delta[u]
            if dones[u]:
                break
            weight *= gamma * lam
    return adv


def gae_error(trials: int = 50) -> float:
    worst = 0.0
    for seed in range(trials):
        rng = np.random.default_rng(seed)
        T = int(rng.integers(1, 40))
        r, v = rng.normal(size=T), rng.normal(size=T)
        d = rng.random(T) < 0.15
        last = float(rng.normal())
        gamma, lam = float(rng.uniform(0.8, 1.0)), float(rng.uniform(0.0, 1.0))
        adv, _ = compute_gae(r, v, d, gamma, lam, last_values=np.array(last))
        worst = max(worst, float(np.max(np.abs(adv - gae_brute_force(r, v, d, gamma, lam, last)))))
    return worst


def _relative_error(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def _central_difference(flat, loss, eps=1e-6):
    grad = np.zeros_like(flat)
    for idx in range(flat.size):
        keep = flat[idx]
        flat[idx] = keep + eps
        up = loss()
        flat[idx] = keep - eps
        down = loss()
        flat[idx] = keep
        grad[idx] = (up - down) / (2 * eps)
    return grad


def _small_model(discrete: bool, seed: int):
    rng = np.random.default_rng(seed)
    model = ActorCritic(3, 2, 2, discrete, n_actions=3, action_dim=2, hidden=(8,), rng=rng, dtype=np.float64)
    model.actor.params["heads.W"][...] = rng.normal(scale=0.5, size=model.actor.params["heads.W"].shape)
    if not discrete:
        model.actor.params["log_std"][...] = rng.normal(scale=0.3, size=model.log_std.shape)
    return model, rng


def actor_gradient_error(discrete: bool = True, seed: int = 0, corrupt: bool = False) -> float:
    model, rng = _small_model(discrete, seed)
    k, m = 2, 6
    obs = rng.normal(size=(k, m, 3))
    dist = model.distribution(model.actor.forward_heads(obs))
    actions = dist.sample(rng)
    # behaviour log-probs near the current ones so ratios sit on both sides of the clip range
    old = dist.log_prob(actions) + rng.uniform(-0.3, 0.3, size=(k, m))
    marginal = rng.normal(size=(k, m))
    active = np.array([True, True])

    def loss():
        model.actor.zero_grad()
        losses, _, _ = actor_backward(model, obs, actions, old, marginal, active, 0.2, 0.01)
        return float(losses.sum())

    loss()
    analytic = model.actor.flat_grads.copy()
    if corrupt:
        analytic[: model.actor.params["trunk.0.W"].size] *= 1.05
    numeric = _central_difference(model.actor.flat_params, loss)
    return _relative_error(analytic, numeric)


def critic_gradient_error(seed: int = 0) -> float:
    model, rng = _small_model(True, seed)
    obs = rng.normal(size=(2, 6, 3))
    targets = rng.normal(size=(2, 6, 2))

    def loss():
        model.critic.zero_grad()
        return float(critic_backward(model, obs, targets).sum())

    loss()
    analytic = model.critic.flat_grads.copy()
    return _relative_error(analytic, _central_difference(model.critic.flat_params, loss))


def logits_gradient_error(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    n, k, batch = 4, 3, 5
    psi = rng.normal(size=(n, k))
    ratios = rng.uniform(0.8, 1.2, size=(k, batch))
    adv = rng.normal(size=(k, batch, n))

    def loss():
        return float(-np.einsum("kt,kti,ik->", ratios, adv, soft_alpha(psi)) / batch)

    return _relative_error(soft_logits_grad(psi, ratios, adv), _central_difference(psi.reshape(-1), loss))


def orthogonal_error(trials: int = 20) -> float:
    worst = 0.0
    for seed in range(trials):
        rng = np.random.default_rng(seed)
        rows, cols = (int(x) for x in rng.integers(1, 80, size=2))
        gain = float(rng.choice([1.0, np.sqrt(2.0), 0.01]))
        W = orthogonal_init(rows, cols, gain, rng)
        gram = W @ W.T if rows <= cols else W.T @ W
        worst = max(worst, float(np.max(np.abs(gram - gain ** 2 * np.eye(min(rows, cols))))))
    return worst


def soft_alpha_error(trials: int = 100) -> float:
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(trials):
        psi = rng.normal(scale=rng.uniform(0.1, 50.0), size=(int(rng.integers(1, 20)), int(rng.integers(1, 8))))
        worst = max(worst, float(np.max(np.abs(soft_alpha(psi).sum(axis=1) - 1.0))))
    return worst


def lloyd_monotone(datasets: int = 100) -> int:
    """Number of random datasets on which Lloyd's inertia never increases."""
    good = 0
    for seed in range(datasets):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 60))
        pts = rng.normal(size=(n, int(rng.integers(1, 6))))
        k = int(rng.integers(1, min(n, 8) + 1))
        hist = np.array(lloyd(pts, kmeans_plus_plus(pts, k, rng)).history)
        good += bool(np.all(np.diff(hist) <= 1e-9 * max(1.0, hist[0])))
    return good


# -- report -------------------------------------------------------------------------

def run_checks(corrupt_gradient: bool = False, tabular_instances: int = 200) -> list[Check]:
    checks = []

    def add(name, measured, threshold, passed, detail=""):
        checks.append(Check(name, float(measured), float(threshold), bool(passed), detail))

    t0 = time.perf_counter()
    ok, failures = em_suite(tabular_instances)
    add("tabular_em_monotone_convergent_fixed_point", ok, tabular_instances, ok == tabular_instances,
        f"failing seeds {failures[:10]}; {time.perf_counter() - t0:.1f}s")
    gap = value_function_identity()
    add("weighted_reward_value_identity", gap, 1e-9, gap <= 1e-9)
    err = gae_error()
    add("gae_matches_brute_force", err, 1e-9, err <= 1e-9)
    worst = max(actor_gradient_error(True, s, corrupt_gradient) for s in range(3))
    add("actor_gradient_discrete", worst, GRAD_TOL, worst <= GRAD_TOL)
    worst = max(actor_gradient_error(False, s, corrupt_gradient) for s in range(3))
    add("actor_gradient_gaussian", worst, GRAD_TOL, worst <= GRAD_TOL)
    worst = max(critic_gradient_error(s) for s in range(3))
    add("critic_gradient", worst, GRAD_TOL, worst <= GRAD_TOL)
    worst = max(logits_gradient_error(s) for s in range(3))
    add("assignment_logits_gradient", worst, GRAD_TOL, worst <= GRAD_TOL)
    err = orthogonal_error()
    add("orthogonal_init_gram", err, 1e-4, err <= 1e-4)
    err = soft_alpha_error()
    add("soft_alpha_rows_sum_to_one", err, 1e-6, err <= 1e-6)
    good = lloyd_monotone()
    add("lloyd_inertia_non_increasing", good, 100, good == 100)
    _, sw = rg_optimal_oracle(ResourceGatheringConfig())
    add("resource_gathering_oracle", sw, 93.52, abs(sw - 93.52) <= 1e-9)
    return checks


def report_json(checks) -> str:
    return json.dumps({"passed": all(c.passed for c in checks), "checks": [asdict(c) for c in checks]}, indent=2)
