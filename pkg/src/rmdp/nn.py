"""A small numpy MLP stack: shared-trunk multi-head nets, Adam, distributions.

Layout: weights are stored ``(in, out)`` so a forward pass is ``x @ W + b``.
All heads share the tanh trunk; head ``j`` is an affine map on the last
hidden layer.  ``forward_heads`` evaluates every head on its own slice of a
``(heads, batch, in)`` tensor, which is how the trainer runs all
representatives in one pass.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np

from .core import ContractViolation, InvalidArgument, RMdpError, TrainingFault

LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def orthogonal_init(rows: int, cols: int, gain: float, rng: np.random.Generator) -> np.ndarray:
    """Random matrix with orthonormal rows (or columns when rows > cols), times ``gain``."""
    if rows < 1 or cols < 1:
        raise InvalidArgument("matrix dimensions must be positive")
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.where(np.diag(r) == 0, 1.0, np.diag(r)))
    if rows < cols:
        q = q.T
    return gain * q


class DenseNet:
    """Tanh MLP trunk shared by ``heads`` linear output heads."""

    def __init__(self, in_dim: int, out_dim: int, heads: int = 1, hidden=(64,),
                 rng: np.random.Generator | None = None, trunk_gain: float = math.sqrt(2.0),
                 head_gain: float = 1.0, dtype=np.float32, extra_params: dict | None = None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.in_dim, self.out_dim, self.heads = in_dim, out_dim, heads
        self.hidden = tuple(hidden)
        self.dtype = np.dtype(dtype)
        init: dict[str, np.ndarray] = {}
        prev = in_dim
        for li, h in enumerate(self.hidden):
            init[f"trunk.{li}.W"] = orthogonal_init(prev, h, trunk_gain, rng)
            init[f"trunk.{li}.b"] = np.zeros(h)
            prev = h
        init["heads.W"] = np.stack([orthogonal_init(prev, out_dim, head_gain, rng) for _ in range(heads)])
        init["heads.b"] = np.zeros((heads, out_dim))
        for name, shape in (extra_params or {}).items():
            init[name] = np.zeros(shape)
        # parameters and gradients are views into single flat buffers
        size = sum(a.size for a in init.values())
        self.flat_params = np.zeros(size, dtype=self.dtype)
        self.flat_grads = np.zeros(size, dtype=self.dtype)
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        pos = 0
        for name, arr in init.items():
            view = self.flat_params[pos:pos + arr.size].reshape(arr.shape)
            view[...] = arr
            self.params[name] = view
            self.grads[name] = self.flat_grads[pos:pos + arr.size].reshape(arr.shape)
            pos += arr.size
        self._cache = None

    @property
    def n_layers(self) -> int:
        return len(self.hidden)

    def zero_grad(self):
        self.flat_grads.fill(0.0)

    def _trunk(self, x):
        acts = [x]
        for li in range(self.n_layers):
            x = np.tanh(x @ self.params[f"trunk.{li}.W"] + self.params[f"trunk.{li}.b"])
            acts.append(x)
        return acts

    def forward(self, obs, head: int = 0) -> np.ndarray:
        """Output of one head for an observation vector or a batch of them."""
        if not 0 <= head < self.heads:
            raise InvalidArgument(f"head index {head} out of range [0, {self.heads})")
        x = np.asarray(obs, dtype=self.dtype)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[-1] != self.in_dim:
            raise InvalidArgument(f"observation dimension {x.shape[-1]} != {self.in_dim}")
        acts = self._trunk(x)
        out = acts[-1] @ self.params["heads.W"][head] + self.params["heads.b"][head]
        self._cache = ("single", head, acts)
        return out[0] if single else out

    def forward_heads(self, x) -> np.ndarray:
        """Head ``j`` applied to ``x[j]``; ``x`` has shape ``(heads, batch, in)``."""
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 3 or x.shape[0] != self.heads or x.shape[2] != self.in_dim:
            raise InvalidArgument(f"expected ({self.heads}, batch, {self.in_dim}) input, got {x.shape}")
        heads, batch, _ = x.shape
        acts = self._trunk(x.reshape(heads * batch, self.in_dim))
        hid = acts[-1].reshape(heads, batch, -1)
        out = np.matmul(hid, self.params["heads.W"]) + self.params["heads.b"][:, None, :]
        self._cache = ("grouped", None, acts)
        return out

    def predict_heads(self, x) -> np.ndarray:
        """``forward_heads`` without touching the backward cache."""
        cache = self._cache
        out = self.forward_heads(x)
        self._cache = cache
        return out

    def backward(self, upstream) -> dict[str, np.ndarray]:
        """Accumulate parameter gradients of ``sum(upstream * last_output)``."""
        if self._cache is None:
            raise ContractViolation("backward called without a cached forward pass")
        mode, head, acts = self._cache
        self._cache = None
        g = np.asarray(upstream, dtype=self.dtype)
        hid = acts[-1]
        if mode == "single":
            g = np.atleast_2d(g)
            self.grads["heads.W"][head] += hid.T @ g
            self.grads["heads.b"][head] += g.sum(axis=0)
            dh = g @ self.params["heads.W"][head].T
        else:
            heads, batch, _ = g.shape
            hid3 = hid.reshape(heads, batch, -1)
            self.grads["heads.W"] += np.matmul(hid3.transpose(0, 2, 1), g)
            self.grads["heads.b"] += g.sum(axis=1)
            dh = np.matmul(g, self.params["heads.W"].transpose(0, 2, 1)).reshape(heads * batch, -1)
        for li in reversed(range(self.n_layers)):
            dpre = dh * (1.0 - acts[li + 1] ** 2)
            self.grads[f"trunk.{li}.W"] += acts[li].T @ dpre
            self.grads[f"trunk.{li}.b"] += dpre.sum(axis=0)
            if li:
                dh = dpre @ self.params[f"trunk.{li}.W"].T
        return self.grads

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + k: v.copy() for k, v in self.params.items()}

    def load_state_dict(self, tensors: dict[str, np.ndarray], prefix: str = ""):
        for k in self.params:
            if prefix + k not in tensors:
                raise InvalidArgument(f"missing tensor {prefix + k}")
            arr = np.asarray(tensors[prefix + k], dtype=self.dtype)
            if arr.shape != self.params[k].shape:
                raise InvalidArgument(f"shape mismatch for {prefix + k}: {arr.shape} vs {self.params[k].shape}")
            self.params[k][...] = arr


# -- optimisation -----------------------------------------------------------

class AdamState:
    def __init__(self, params: dict[str, np.ndarray], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-5):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], adam: AdamState, lr: float):
    """In-place bias-corrected Adam update; returns ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingFault(f"non-finite gradient for {name}")
    adam.t += 1
    b1, b2 = adam.beta1, adam.beta2
    step = lr * math.sqrt(1.0 - b2 ** adam.t) / (1.0 - b1 ** adam.t)
    # eps is applied to the bias-corrected second moment
    eps_hat = adam.eps * math.sqrt(1.0 - b2 ** adam.t)
    for name, g in grads.items():
        m, v = adam.m[name], adam.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= (step * m / (np.sqrt(v) + eps_hat)).astype(params[name].dtype, copy=False)
    return params


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))


def clip_grad_norm(grad_dicts, max_norm: float) -> float:
    """Scale all gradients in place so their joint L2 norm is at most ``max_norm``."""
    arrays = [g for d in grad_dicts for g in d.values()]
    norm = global_norm(arrays)
    if not math.isfinite(norm):
        raise TrainingFault("non-finite gradient norm")
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in arrays:
            g *= scale
    return norm


# -- distributions ----------------------------------------------------------

def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class Categorical:
    def __init__(self, logits):
        self.logits = np.asarray(logits, dtype=np.float64)
        self.log_probs = log_softmax(self.logits)
        self.probs = np.exp(self.log_probs)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        cdf = np.cumsum(self.probs, axis=-1)
        u = rng.random(cdf.shape[:-1] + (1,))
        return np.minimum((cdf < u * cdf[..., -1:]).sum(axis=-1), cdf.shape[-1] - 1)

    def mode(self) -> np.ndarray:
        return np.argmax(self.logits, axis=-1)

    def log_prob(self, actions) -> np.ndarray:
        actions = np.asarray(actions, dtype=np.int64)
        return np.take_along_axis(self.log_probs, actions[..., None], axis=-1)[..., 0]

    def entropy(self) -> np.ndarray:
        return -(self.probs * self.log_probs).sum(axis=-1)

    def grad_log_prob(self, actions) -> np.ndarray:
        """d log_prob(a) / d logits."""
        g = -self.probs.copy()
        np.put_along_axis(g, np.asarray(actions, dtype=np.int64)[..., None], 1.0 + np.take_along_axis(
            g, np.asarray(actions, dtype=np.int64)[..., None], axis=-1), axis=-1)
        return g

    def grad_entropy(self) -> np.ndarray:
        h = self.entropy()[..., None]
        return -self.probs * (self.log_probs + h)


class DiagGaussian:
    """Independent normals with a state-independent log standard deviation."""

    def __init__(self, mean, log_std):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.log_std = np.clip(np.asarray(log_std, dtype=np.float64), LOG_STD_MIN, LOG_STD_MAX)
        self.log_std = np.broadcast_to(self.log_std, self.mean.shape)
        self.std = np.exp(self.log_std)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.mean + self.std * rng.standard_normal(self.mean.shape)

    def mode(self) -> np.ndarray:
        return self.mean

    def log_prob(self, actions) -> np.ndarray:
        z = (np.asarray(actions, dtype=np.float64) - self.mean) / self.std
        return (-0.5 * z * z - self.log_std - HALF_LOG_2PI).sum(axis=-1)

    def entropy(self) -> np.ndarray:
        return (self.log_std + 0.5 + HALF_LOG_2PI).sum(axis=-1)

    def grad_log_prob(self, actions):
        """(d/d mean, d/d log_std) of log_prob, elementwise per dimension."""
        z = (np.asarray(actions, dtype=np.float64) - self.mean) / self.std
        return z / self.std, z * z - 1.0

    def grad_entropy(self):
        return np.zeros_like(self.mean), np.ones_like(self.mean)


def clip_action(actions, low: float = -1.0, high: float = 1.0) -> np.ndarray:
    return np.clip(actions, low, high)


# -- observation normalisation ----------------------------------------------

class ObsNormalizer:
    """Running mean/variance over observations, merged batch-wise (Chan et al. update)."""

    def __init__(self, dim: int, clip: float = 10.0, eps: float = 1e-8):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.count = 0
        self._m2 = np.zeros(dim)
        self.clip = clip
        self.eps = eps

    def update(self, batch):
        batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
        nb = batch.shape[0]
        if nb == 0:
            return
        bmean = batch.mean(axis=0)
        bm2 = ((batch - bmean) ** 2).sum(axis=0)
        total = self.count + nb
        delta = bmean - self.mean
        self.mean = self.mean + delta * nb / total
        self._m2 = self._m2 + bm2 + delta ** 2 * self.count * nb / total
        self.count = total
        self.var = self._m2 / total

    def __call__(self, obs) -> np.ndarray:
        z = (np.asarray(obs, dtype=np.float64) - self.mean) / np.sqrt(self.var + self.eps)
        return np.clip(z, -self.clip, self.clip)

    def state_dict(self, prefix="obs_norm."):
        return {prefix + "mean": self.mean.copy(), prefix + "var": self.var.copy(),
                prefix + "count": np.array([self.count], dtype=np.float64)}

    def load_state_dict(self, tensors, prefix="obs_norm."):
        self.mean = np.asarray(tensors[prefix + "mean"], dtype=np.float64).copy()
        self.var = np.asarray(tensors[prefix + "var"], dtype=np.float64).copy()
        self.count = int(np.asarray(tensors[prefix + "count"]).reshape(-1)[0])
        self._m2 = self.var * self.count


# -- checkpoints ------------------------------------------------------------

MAGIC = b"RMDP1"


class CheckpointError(RMdpError, ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray]):
    """Write tensors as: magic, then per record name-length, name, rank, dims, float32 payload."""
    parts = [MAGIC]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic")
    pos, out = len(MAGIC), {}
    try:
        while pos < len(data):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 4 * count > len(data):
                raise CheckpointError(f"{path}: truncated payload for {name!r}")
            out[name] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims).copy()
            pos += 4 * count
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated record") from exc
    return out
