"""Assignment learners: the Q-table/E-step pair and end-to-end softmax logits."""

from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np

from .core import InvalidArgument, RMdpError, harden, one_hot
from .nn import AdamState, adam_step

__all__ = [
    "QTable", "AssignmentLogits", "e_step", "soft_alpha", "soft_logits_grad", "harden",
    "initial_hard_assignment", "write_assignment_csv", "read_assignment_csv",
]


class QTable:
    """Moving-average estimates of agent ``i``'s episode return under policy ``j``."""

    def __init__(self, n: int, k: int, mixing: float = 0.05):
        if not 0.0 < mixing <= 1.0:
            raise InvalidArgument(f"mixing coefficient must lie in (0, 1], got {mixing}")
        self.q = np.zeros((n, k), dtype=np.float64)
        self.mixing = mixing

    def update(self, i, j: int, episode_return):
        """``q[i, j] <- (1 - lambda) q[i, j] + lambda R``; ``i`` may be an index array or slice."""
        episode_return = np.asarray(episode_return, dtype=np.float64)
        if not np.all(np.isfinite(episode_return)):
            raise InvalidArgument("episode return must be finite")
        lam = self.mixing
        self.q[i, j] = (1.0 - lam) * self.q[i, j] + lam * episode_return
        return self

    def update_episodes(self, j: int, returns):
        """Apply one update per completed episode (rows of ``returns``, in order) for every agent."""
        returns = np.asarray(returns, dtype=np.float64).reshape(-1, self.q.shape[0])
        count = returns.shape[0]
        if not count:
            return self
        if not np.all(np.isfinite(returns)):
            raise InvalidArgument("episode returns must be finite")
        lam = self.mixing
        weights = lam * (1.0 - lam) ** np.arange(count - 1, -1, -1)
        self.q[:, j] = (1.0 - lam) ** count * self.q[:, j] + weights @ returns
        return self


def e_step(q) -> np.ndarray:
    """Hard reassignment of every agent to its best representative (lowest index on ties)."""
    q = q.q if isinstance(q, QTable) else np.asarray(q, dtype=np.float64)
    return harden(q)


def soft_alpha(psi) -> np.ndarray:
    """Per-agent softmax over representatives, so each row sums to one."""
    psi = psi.psi if isinstance(psi, AssignmentLogits) else np.asarray(psi, dtype=np.float64)
    z = psi - psi.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def soft_logits_grad(psi, clipped_ratios, advantages) -> np.ndarray:
    """Gradient of ``-sum_j mean_t c[j, t] sum_i alpha[i, j] A[j, t, i]`` with respect to the logits.

    ``clipped_ratios`` has shape ``(k, batch)`` and is held constant;
    ``advantages`` has shape ``(k, batch, n)`` (per-agent, unnormalised).
    """
    alpha = soft_alpha(psi)
    clipped_ratios = np.asarray(clipped_ratios, dtype=np.float64)
    advantages = np.asarray(advantages, dtype=np.float64)
    batch = clipped_ratios.shape[1]
    # dL/dalpha[i, j]
    g_alpha = -np.einsum("kt,kti->ik", clipped_ratios, advantages) / batch
    return alpha * (g_alpha - (alpha * g_alpha).sum(axis=1, keepdims=True))


class AssignmentLogits:
    """``n x k`` logits trained with Adam alongside the actors."""

    def __init__(self, n: int, k: int, lr: float = 0.002):
        self.psi = np.zeros((n, k), dtype=np.float64)
        self.lr = lr
        self.adam = AdamState({"psi": self.psi})

    @property
    def alpha(self) -> np.ndarray:
        return soft_alpha(self.psi)

    def step(self, clipped_ratios, advantages):
        grad = soft_logits_grad(self.psi, clipped_ratios, advantages)
        adam_step({"psi": self.psi}, {"psi": grad}, self.adam, self.lr)
        return grad


def initial_hard_assignment(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Random hard assignment in which every representative owns at least one agent."""
    if k > n:
        raise InvalidArgument(f"cannot give each of {k} representatives an agent with n={n}")
    labels = np.concatenate([np.arange(k), rng.integers(0, k, size=n - k)])
    return one_hot(rng.permutation(labels), k)


# -- CSV exchange -----------------------------------------------------------

class AssignmentCsvError(RMdpError, ValueError):
    pass


def format_assignment_csv(alpha, header_comment: str | None = None) -> str:
    alpha = np.asarray(alpha, dtype=np.float64)
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    writer = csv.writer(buf, lineterminator="\n")
    for row in alpha:
        writer.writerow([f"{x:.9g}" for x in row])
    return buf.getvalue()


def write_assignment_csv(path, alpha, header_comment: str | None = None):
    Path(path).write_text(format_assignment_csv(alpha, header_comment))


def read_assignment_csv(path) -> np.ndarray:
    rows = []
    width = None
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        try:
            row = [float(x) for x in next(csv.reader([line]))]
        except ValueError as exc:
            raise AssignmentCsvError(f"{path}:{lineno}: {exc}") from exc
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise AssignmentCsvError(f"{path}:{lineno}: expected {width} columns, got {len(row)}")
        rows.append(row)
    if not rows:
        raise AssignmentCsvError(f"{path}: no assignment rows")
    return np.array(rows)
