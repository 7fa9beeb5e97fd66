"""Exact EM on small tabular r-MDPs.

Policy evaluation is a linear solve (discounted, infinite horizon) or backward
induction (finite horizon, time-indexed policies), so the welfare trace of
``em_solve`` can be checked for monotonicity to rounding precision.

Instance file format (plain text, ``#`` starts a comment)::

    states 3
    actions 2
    agents 4
    gamma 0.9
    horizon inf            # or a positive integer
    init
    <S probabilities>
    transitions
    <S*A rows of S probabilities, row (s, a) at index s*A + a>
    rewards
    <n*S rows of A rewards, row (i, s) at index i*S + s>
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ContractViolation, InvalidArgument, NumericalFault, RMdpError, one_hot

TIE_TOL = 1e-10


@dataclass
class TabularRMdp:
    transitions: np.ndarray  # (S, A, S)
    init: np.ndarray         # (S,)
    rewards: np.ndarray      # (n, S, A)
    gamma: float = 0.9
    horizon: int | None = None

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.init = np.asarray(self.init, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        S, A, S2 = self.transitions.shape
        if S != S2 or self.init.shape != (S,) or self.rewards.shape[1:] != (S, A):
            raise InvalidArgument("inconsistent tabular r-MDP dimensions")
        if not np.allclose(self.transitions.sum(axis=2), 1.0, atol=1e-9) or np.any(self.transitions < 0):
            raise InvalidArgument("transition rows must be probability vectors")
        if not np.isclose(self.init.sum(), 1.0, atol=1e-9) or np.any(self.init < 0):
            raise InvalidArgument("initial distribution must sum to 1")
        if not 0.0 < self.gamma < 1.0:
            raise InvalidArgument("gamma must lie in (0, 1)")
        if self.horizon is not None and self.horizon < 1:
            raise InvalidArgument("horizon must be positive")

    @property
    def n_states(self):
        return self.transitions.shape[0]

    @property
    def n_actions(self):
        return self.transitions.shape[1]

    @property
    def n_agents(self):
        return self.rewards.shape[0]


def random_instance(rng: np.random.Generator, n_states: int, n_actions: int, n_agents: int,
                    gamma: float = 0.9, horizon: int | None = None) -> TabularRMdp:
    T = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    init = rng.dirichlet(np.ones(n_states))
    R = rng.uniform(0.0, 1.0, size=(n_agents, n_states, n_actions))
    return TabularRMdp(T, init, R, gamma, horizon)


# -- evaluation -------------------------------------------------------------

def weighted_reward(rmdp: TabularRMdp, alpha_column) -> np.ndarray:
    """``sum_i alpha[i] * r_i`` as an S x A table."""
    w = np.asarray(alpha_column, dtype=np.float64)
    if w.shape != (rmdp.n_agents,) or np.any(w < 0):
        raise InvalidArgument("assignment column must be non-negative with one entry per agent")
    return np.tensordot(w, rmdp.rewards, axes=1)


def policy_values(rmdp: TabularRMdp, policy, reward) -> np.ndarray:
    """State values of ``policy`` under an S x A (or stacked n x S x A) reward."""
    policy = np.asarray(policy, dtype=np.float64)
    reward = np.asarray(reward, dtype=np.float64)
    T, g = rmdp.transitions, rmdp.gamma
    if rmdp.horizon is None:
        P = np.einsum("sa,sat->st", policy, T)
        r = np.einsum("sa,...sa->...s", policy, reward)
        system = np.eye(rmdp.n_states) - g * P
        try:
            return np.linalg.solve(system, r.T).T
        except np.linalg.LinAlgError as exc:
            raise NumericalFault("singular policy-evaluation system") from exc
    pol = np.broadcast_to(policy, (rmdp.horizon,) + policy.shape[-2:])
    v = np.zeros(reward.shape[:-1])
    for t in range(rmdp.horizon - 1, -1, -1):
        q = reward + g * np.einsum("sat,...t->...sa", T, v)
        v = np.einsum("sa,...sa->...s", pol[t], q)
    return v


def start_values(rmdp: TabularRMdp, policy) -> np.ndarray:
    """``E_{s0 ~ T0} V_i(s0)`` for every agent under one policy."""
    return policy_values(rmdp, policy, rmdp.rewards) @ rmdp.init


def value_table(rmdp: TabularRMdp, policies) -> np.ndarray:
    return np.stack([start_values(rmdp, p) for p in policies], axis=1)


def welfare(rmdp: TabularRMdp, alpha, policies) -> float:
    alpha = np.asarray(alpha, dtype=np.float64)
    return float(np.sum(alpha * value_table(rmdp, policies)) / rmdp.n_agents)


def _greedy(q) -> np.ndarray:
    """Deterministic policy: lowest action within TIE_TOL of the best."""
    best = q.max(axis=-1, keepdims=True)
    choice = np.argmax(q >= best - TIE_TOL * np.maximum(1.0, np.abs(best)), axis=-1)
    return np.eye(q.shape[-1])[choice]


def optimal_policy(rmdp: TabularRMdp, reward, max_iter: int = 1000) -> np.ndarray:
    """Optimal deterministic policy for one reward table.

    Discounted: policy iteration with exact evaluation, then the canonical
    greedy policy of the converged values.  Finite horizon: backward
    induction, returning an ``(H, S, A)`` time-indexed policy.
    """
    reward = np.asarray(reward, dtype=np.float64)
    T, g = rmdp.transitions, rmdp.gamma
    if rmdp.horizon is not None:
        pols = np.zeros((rmdp.horizon, rmdp.n_states, rmdp.n_actions))
        v = np.zeros(rmdp.n_states)
        for t in range(rmdp.horizon - 1, -1, -1):
            q = reward + g * T @ v
            pols[t] = _greedy(q)
            v = (pols[t] * q).sum(axis=1)
        return pols
    policy = np.eye(rmdp.n_actions)[np.zeros(rmdp.n_states, dtype=int)]
    for _ in range(max_iter):
        v = policy_values(rmdp, policy, reward)
        q = reward + g * T @ v
        current = (policy * q).sum(axis=1)
        improve = q.max(axis=1) > current + TIE_TOL * np.maximum(1.0, np.abs(current))
        if not improve.any():
            return _greedy(q)
        policy = np.where(improve[:, None], np.eye(rmdp.n_actions)[np.argmax(q, axis=1)], policy)
    raise NumericalFault("policy iteration did not converge")


# -- E and M steps ----------------------------------------------------------

def exact_m_step(rmdp: TabularRMdp, alpha, policies=None, repair: str = "worst",
                 rng: np.random.Generator | None = None) -> list:
    """Optimal policy of every representative for its assignment-weighted reward.

    A representative without assigned mass needs a repair rule: ``"worst"``
    optimises for the agent currently served worst (requires ``policies``),
    ``"random"`` for a random agent; in both cases the agent's assignment is
    left untouched.  ``"none"`` raises on an empty representative.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    n, k = alpha.shape
    if n != rmdp.n_agents:
        raise InvalidArgument("assignment rows must match the number of agents")
    out = []
    served = None
    for j in range(k):
        col = alpha[:, j]
        if col.sum() <= 0.0:
            if repair == "none":
                raise ContractViolation(f"representative {j} has no assigned agents")
            if repair == "random":
                rng = np.random.default_rng() if rng is None else rng
                col = one_hot([rng.integers(n)], n)[0]
            elif repair == "worst":
                if policies is None:
                    raise ContractViolation(f"representative {j} is empty and no current policies were given")
                if served is None:
                    served = (alpha * value_table(rmdp, policies)).sum(axis=1)
                col = one_hot([int(np.argmin(served))], n)[0]
            else:
                raise InvalidArgument(f"unknown repair rule {repair!r}")
        out.append(optimal_policy(rmdp, weighted_reward(rmdp, col)))
    return out


def exact_e_step(rmdp: TabularRMdp, policies) -> np.ndarray:
    """Assign each agent to the policy with the highest start value (lowest index on ties)."""
    return _greedy(value_table(rmdp, policies))


class NonConvergence(RMdpError, RuntimeError):
    pass


@dataclass
class EmResult:
    alpha: np.ndarray
    policies: list
    sw_trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def _same_policies(a, b) -> bool:
    return a is not None and b is not None and all(np.array_equal(x, y) for x, y in zip(a, b))


def em_solve(rmdp: TabularRMdp, init_alpha, max_iters: int = 50, repair: str = "worst",
             rng: np.random.Generator | None = None) -> EmResult:
    """Alternate exact M- and E-steps until neither assignments nor policies change.

    ``sw_trace`` holds the welfare after every half step (M, E, M, E, ...).
    """
    alpha = np.asarray(init_alpha, dtype=np.float64)
    if np.any(alpha.sum(axis=0) <= 0):
        raise ContractViolation("every representative needs positive initial mass")
    policies = None
    trace = []
    for it in range(1, max_iters + 1):
        new_policies = exact_m_step(rmdp, alpha, policies, repair, rng)
        trace.append(welfare(rmdp, alpha, new_policies))
        new_alpha = exact_e_step(rmdp, new_policies)
        trace.append(welfare(rmdp, new_alpha, new_policies))
        # an unchanged assignment without empty columns makes the next M-step repeat these policies
        stable = _same_policies(new_policies, policies) or bool(np.all(new_alpha.sum(axis=0) > 0))
        done = np.array_equal(new_alpha, alpha) and stable
        alpha, policies = new_alpha, new_policies
        if done:
            return EmResult(alpha, policies, trace, it, True)
    return EmResult(alpha, policies, trace, max_iters, False)


def is_fixed_point(rmdp: TabularRMdp, result: EmResult, repair: str = "worst") -> bool:
    policies = exact_m_step(rmdp, result.alpha, result.policies, repair)
    alpha = exact_e_step(rmdp, policies)
    return np.array_equal(alpha, result.alpha) and _same_policies(policies, result.policies)


def trace_is_monotone(trace, tol: float = 1e-9) -> bool:
    return bool(np.all(np.diff(np.asarray(trace)) >= -tol))


def hard_assignment_welfare(rmdp: TabularRMdp, labels, k: int) -> float:
    """Welfare of a hard assignment with an exact M-step for every non-empty representative."""
    alpha = one_hot(labels, k)
    total = 0.0
    for j in range(k):
        col = alpha[:, j]
        if col.sum() == 0:
            continue
        pol = optimal_policy(rmdp, weighted_reward(rmdp, col))
        total += float(col @ start_values(rmdp, pol))
    return total / rmdp.n_agents


def exhaustive_optimum(rmdp: TabularRMdp, k: int):
    """Best welfare over all ``k**n`` hard assignments; returns ``(sw, labels)``."""
    best, best_labels = -np.inf, None
    for labels in itertools.product(range(k), repeat=rmdp.n_agents):
        sw = hard_assignment_welfare(rmdp, labels, k)
        if sw > best + 1e-12:
            best, best_labels = sw, labels
    return best, np.array(best_labels)


def single_move_improves(rmdp: TabularRMdp, alpha, tol: float = 1e-9) -> bool:
    """Whether moving one agent to another representative (with exact M-steps) raises welfare."""
    labels = np.argmax(alpha, axis=1)
    k = alpha.shape[1]
    base = hard_assignment_welfare(rmdp, labels, k)
    for i in range(len(labels)):
        for j in range(k):
            if j == labels[i]:
                continue
            moved = labels.copy()
            moved[i] = j
            if hard_assignment_welfare(rmdp, moved, k) > base + tol:
                return True
    return False


# -- instance files ---------------------------------------------------------

class InstanceFormatError(RMdpError, ValueError):
    pass


def format_instance(rmdp: TabularRMdp) -> str:
    S, A, n = rmdp.n_states, rmdp.n_actions, rmdp.n_agents

    def row(x):
        return " ".join(f"{v:.17g}" for v in x)

    lines = [f"states {S}", f"actions {A}", f"agents {n}", f"gamma {rmdp.gamma:.17g}",
             f"horizon {'inf' if rmdp.horizon is None else rmdp.horizon}", "init", row(rmdp.init), "transitions"]
    lines += [row(rmdp.transitions[s, a]) for s in range(S) for a in range(A)]
    lines.append("rewards")
    lines += [row(rmdp.rewards[i, s]) for i in range(n) for s in range(S)]
    return "\n".join(lines) + "\n"


def save_instance(path, rmdp: TabularRMdp):
    Path(path).write_text(format_instance(rmdp))


def parse_instance(text: str, source: str = "<string>") -> TabularRMdp:
    header: dict[str, str] = {}
    blocks: dict[str, list] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] in ("init", "transitions", "rewards") and len(parts) == 1:
            current = parts[0]
            blocks[current] = []
        elif current is None:
            if len(parts) != 2:
                raise InstanceFormatError(f"{source}:{lineno}: expected 'key value'")
            header[parts[0]] = parts[1]
        else:
            try:
                blocks[current].append((lineno, [float(x) for x in parts]))
            except ValueError as exc:
                raise InstanceFormatError(f"{source}:{lineno}: {exc}") from exc
    try:
        S, A, n = int(header["states"]), int(header["actions"]), int(header["agents"])
        gamma = float(header["gamma"])
        horizon = None if header.get("horizon", "inf") == "inf" else int(header["horizon"])
    except (KeyError, ValueError) as exc:
        raise InstanceFormatError(f"{source}: bad or missing header field: {exc}") from exc

    def table(name, rows, width):
        got = blocks.get(name)
        if got is None:
            raise InstanceFormatError(f"{source}: missing '{name}' block")
        if len(got) != rows:
            raise InstanceFormatError(f"{source}: '{name}' needs {rows} rows, found {len(got)}")
        for lineno, vals in got:
            if len(vals) != width:
                raise InstanceFormatError(f"{source}:{lineno}: expected {width} numbers, got {len(vals)}")
        return np.array([v for _, v in got])

    init = table("init", 1, S)[0]
    T = table("transitions", S * A, S).reshape(S, A, S)
    R = table("rewards", n * S, A).reshape(n, S, A)
    try:
        return TabularRMdp(T, init, R, gamma, horizon)
    except InvalidArgument as exc:
        raise InstanceFormatError(f"{source}: {exc}") from exc


def load_instance(path) -> TabularRMdp:
    return parse_instance(Path(path).read_text(), str(path))
