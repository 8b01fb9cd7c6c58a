"""Shared policy/value network for hybrid continuous/discrete actions.

A tanh MLP trunk feeds three kinds of heads:

* a Gaussian mean per continuous action (state-independent log-std), sampled
  and then squashed through tanh into [-1, 1];
* a categorical head per discrete device (capacitor, tap changer);
* a scalar state value.

Gradients are written out by hand for this fixed architecture and checked
against finite differences in the test suite.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .env import ActionSpaceDescriptor, ActionVector

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
SQUASH_EPS = 1e-6
# keeps atanh finite for actions sitting exactly on the +-1 boundary
_ATANH_LIMIT = 1.0 - 1e-9
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


class CheckpointMismatch(ValueError):
    pass


def descriptor_hash(desc: ActionSpaceDescriptor, bus_ids: list[str] | None = None) -> str:
    payload = {
        "obs_dim": desc.obs_dim,
        "n_continuous": desc.n_continuous,
        "discrete": list(desc.discrete),
        "devices": [desc.n_pv, desc.n_batt, desc.n_cap, desc.n_tap],
        "buses": list(bus_ids or []),
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


class PolicyParameters:
    """All trainable weights stored in one flat float64 buffer.

    Named arrays (``W1``, ``b1``, ...) are views into ``flat``, so optimizers
    and snapshot transfer can work on the flat vector directly.
    """

    def __init__(self, obs_dim: int, n_continuous: int, discrete: tuple[int, ...],
                 hidden: tuple[int, int] = (256, 256), flat: np.ndarray | None = None,
                 version: int = 0, obs_shift: np.ndarray | None = None,
                 obs_scale: np.ndarray | None = None):
        self.obs_dim = obs_dim
        self.n_continuous = n_continuous
        self.discrete = tuple(int(k) for k in discrete)
        self.hidden = tuple(int(h) for h in hidden)
        self.version = version
        self.obs_shift = np.zeros(obs_dim) if obs_shift is None else np.asarray(obs_shift, float)
        self.obs_scale = np.ones(obs_dim) if obs_scale is None else np.asarray(obs_scale, float)
        h1, h2 = self.hidden
        nl = sum(self.discrete)
        self.shapes = {
            "W1": (obs_dim, h1), "b1": (h1,),
            "W2": (h1, h2), "b2": (h2,),
            "Wmu": (h2, n_continuous), "bmu": (n_continuous,),
            "log_std": (n_continuous,),
            "Wlogit": (h2, nl), "blogit": (nl,),
            "Wv": (h2,), "bv": (1,),
        }
        self.offsets = {}
        off = 0
        for name, shape in self.shapes.items():
            size = int(np.prod(shape))
            self.offsets[name] = (off, off + size)
            off += size
        self.size = off
        if flat is None:
            flat = np.zeros(off)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (off,):
            raise ValueError(f"flat parameter vector has shape {flat.shape}, expected ({off},)")
        self.flat = flat

    def __getitem__(self, name: str) -> np.ndarray:
        a, b = self.offsets[name]
        return self.flat[a:b].reshape(self.shapes[name])

    def unflatten(self, vec: np.ndarray) -> dict[str, np.ndarray]:
        return {n: vec[a:b].reshape(self.shapes[n]) for n, (a, b) in self.offsets.items()}

    def copy(self) -> "PolicyParameters":
        return PolicyParameters(self.obs_dim, self.n_continuous, self.discrete, self.hidden,
                                self.flat.copy(), self.version, self.obs_shift.copy(),
                                self.obs_scale.copy())

    def with_flat(self, flat: np.ndarray, version: int) -> "PolicyParameters":
        return PolicyParameters(self.obs_dim, self.n_continuous, self.discrete, self.hidden,
                                flat, version, self.obs_shift, self.obs_scale)

    @classmethod
    def initialize(cls, obs_dim: int, n_continuous: int, discrete: tuple[int, ...],
                   rng: np.random.Generator, hidden: tuple[int, int] = (256, 256),
                   obs_shift=None, obs_scale=None) -> "PolicyParameters":
        p = cls(obs_dim, n_continuous, discrete, hidden, obs_shift=obs_shift, obs_scale=obs_scale)
        h1, h2 = p.hidden
        p["W1"][:] = rng.normal(0.0, 1.0 / np.sqrt(obs_dim), (obs_dim, h1))
        p["W2"][:] = rng.normal(0.0, 1.0 / np.sqrt(h1), (h1, h2))
        # small output layers start the policy near uniform / zero-mean
        p["Wmu"][:] = rng.normal(0.0, 0.01 / np.sqrt(h2), (h2, n_continuous))
        p["Wlogit"][:] = rng.normal(0.0, 0.01 / np.sqrt(h2), (h2, sum(p.discrete)))
        p["Wv"][:] = rng.normal(0.0, 1.0 / np.sqrt(h2), h2)
        return p

    @classmethod
    def for_descriptor(cls, desc: ActionSpaceDescriptor, rng: np.random.Generator,
                       hidden: tuple[int, int] = (256, 256), obs_shift=None,
                       obs_scale=None) -> "PolicyParameters":
        return cls.initialize(desc.obs_dim, desc.n_continuous, desc.discrete, rng, hidden,
                              obs_shift, obs_scale)


@dataclass
class ActionDistribution:
    mean: np.ndarray  # (B, n_continuous), pre-squash
    log_std: np.ndarray  # (n_continuous,), already clamped
    logits: list[np.ndarray] = field(default_factory=list)  # one (B, k) array per head

    @property
    def batch_size(self) -> int:
        return self.mean.shape[0]


@dataclass
class _Cache:
    x: np.ndarray
    h1: np.ndarray
    h2: np.ndarray


def _forward(params: PolicyParameters, obs: np.ndarray):
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    if obs.shape[1] != params.obs_dim:
        raise ValueError(f"observation length {obs.shape[1]} != expected {params.obs_dim}")
    x = (obs - params.obs_shift) * params.obs_scale
    h1 = np.tanh(x @ params["W1"] + params["b1"])
    h2 = np.tanh(h1 @ params["W2"] + params["b2"])
    mean = h2 @ params["Wmu"] + params["bmu"]
    flat_logits = h2 @ params["Wlogit"] + params["blogit"]
    logits = np.split(flat_logits, np.cumsum(params.discrete)[:-1], axis=1) if params.discrete else []
    value = h2 @ params["Wv"] + params["bv"][0]
    log_std = np.clip(params["log_std"], LOG_STD_MIN, LOG_STD_MAX)
    return ActionDistribution(mean, log_std, list(logits)), value, _Cache(x, h1, h2)


def forward(params: PolicyParameters, obs: np.ndarray) -> tuple[ActionDistribution, np.ndarray]:
    """Action distribution and state value for a batch (or a single) observation."""
    dist, value, _ = _forward(params, obs)
    return dist, value


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))


def _pre_squash(continuous: np.ndarray) -> np.ndarray:
    return np.arctanh(np.clip(continuous, -_ATANH_LIMIT, _ATANH_LIMIT))


def log_prob(dist: ActionDistribution, continuous: np.ndarray, discrete: np.ndarray) -> np.ndarray:
    """Joint log-density of squashed continuous and categorical actions, per row."""
    continuous = np.atleast_2d(np.asarray(continuous, float))
    discrete = np.atleast_2d(np.asarray(discrete)).astype(int)
    B = dist.batch_size
    total = np.zeros(B)
    if dist.mean.shape[1]:
        a = np.clip(continuous, -1.0, 1.0)
        u = _pre_squash(a)
        z = (u - dist.mean) * np.exp(-dist.log_std)
        gauss = -0.5 * z * z - dist.log_std - _HALF_LOG_2PI
        total += gauss.sum(axis=1) - np.log(1.0 - a * a + SQUASH_EPS).sum(axis=1)
    rows = np.arange(B)
    for k, logits in enumerate(dist.logits):
        idx = discrete[:, k]
        if np.any(idx < 0) or np.any(idx >= logits.shape[1]):
            raise IndexError(f"discrete action out of range for head {k} (size {logits.shape[1]})")
        total += _log_softmax(logits)[rows, idx]
    return total


def sample(dist: ActionDistribution, rng: np.random.Generator):
    """Draw actions; returns (continuous (B, n), discrete (B, heads), log_prob (B,))."""
    B = dist.batch_size
    u = dist.mean + np.exp(dist.log_std) * rng.standard_normal(dist.mean.shape)
    cont = np.tanh(u)
    disc = np.zeros((B, len(dist.logits)), dtype=int)
    for k, logits in enumerate(dist.logits):
        p = np.exp(_log_softmax(logits))
        cdf = np.cumsum(p, axis=1)
        r = rng.random((B, 1))
        disc[:, k] = np.minimum((cdf < r * cdf[:, -1:]).sum(axis=1), logits.shape[1] - 1)
    return cont, disc, log_prob(dist, cont, disc)


def mode(dist: ActionDistribution):
    """Deterministic action: squashed mean and per-head argmax."""
    cont = np.tanh(dist.mean)
    disc = np.stack([np.argmax(l, axis=1) for l in dist.logits], axis=1) if dist.logits \
        else np.zeros((dist.batch_size, 0), dtype=int)
    return cont, disc


def entropy(dist: ActionDistribution) -> np.ndarray:
    """Per-row entropy: pre-squash Gaussian entropy plus exact categorical entropies."""
    ent = np.full(dist.batch_size, float(np.sum(dist.log_std + 0.5 * np.log(2 * np.pi * np.e))))
    for logits in dist.logits:
        lp = _log_softmax(logits)
        ent -= (np.exp(lp) * lp).sum(axis=1)
    return ent


def to_action_vectors(cont: np.ndarray, disc: np.ndarray) -> list[ActionVector]:
    return [ActionVector(c, d) for c, d in zip(cont, disc)]


@dataclass
class LossSpec:
    value_coef: float = 0.5
    entropy_coef: float = 0.01


@dataclass
class LossTerms:
    policy_loss: float
    value_loss: float
    entropy: float
    total: float


def loss_and_grad(params: PolicyParameters, obs: np.ndarray, continuous: np.ndarray,
                  discrete: np.ndarray, pg_advantages: np.ndarray, value_targets: np.ndarray,
                  spec: LossSpec = LossSpec()) -> tuple[LossTerms, np.ndarray]:
    """Composite loss and its exact gradient w.r.t. the flat parameter vector.

    ``pg_advantages`` and ``value_targets`` are constants (no gradient flows
    through them).
    """
    dist, value, cache = _forward(params, obs)
    N = dist.batch_size
    adv = np.asarray(pg_advantages, float).reshape(N)
    vs = np.asarray(value_targets, float).reshape(N)
    continuous = np.atleast_2d(np.asarray(continuous, float))
    discrete = np.atleast_2d(np.asarray(discrete)).astype(int)

    logp = log_prob(dist, continuous, discrete)
    ent = entropy(dist)
    policy_loss = -float(np.mean(logp * adv))
    value_loss = float(np.mean((vs - value) ** 2))
    ent_mean = float(np.mean(ent))
    total = policy_loss + spec.value_coef * value_loss - spec.entropy_coef * ent_mean
    for name, val in (("policy_loss", policy_loss), ("value_loss", value_loss),
                      ("entropy", ent_mean)):
        if not np.isfinite(val):
            raise FloatingPointError(f"non-finite {name}: {val}")

    g = params.unflatten(np.zeros(params.size))
    w = adv / N

    # continuous heads
    nc = params.n_continuous
    d_mean = np.zeros((N, nc))
    if nc:
        u = _pre_squash(np.clip(continuous, -1.0, 1.0))
        inv_var = np.exp(-2.0 * dist.log_std)
        diff = u - dist.mean
        d_mean = -w[:, None] * diff * inv_var
        d_logstd = -(w[:, None] * (diff * diff * inv_var - 1.0)).sum(axis=0) - spec.entropy_coef
        raw = params["log_std"]
        d_logstd = np.where((raw >= LOG_STD_MIN) & (raw <= LOG_STD_MAX), d_logstd, 0.0)
        g["log_std"][:] = d_logstd

    # categorical heads
    d_logits = []
    rows = np.arange(N)
    for k, logits in enumerate(dist.logits):
        lp = _log_softmax(logits)
        p = np.exp(lp)
        onehot = np.zeros_like(p)
        onehot[rows, discrete[:, k]] = 1.0
        H = -(p * lp).sum(axis=1, keepdims=True)
        d_logits.append(-w[:, None] * (onehot - p) + (spec.entropy_coef / N) * p * (lp + H))
    d_logits = np.concatenate(d_logits, axis=1) if d_logits else np.zeros((N, 0))

    d_value = spec.value_coef * 2.0 * (value - vs) / N

    h1, h2, x = cache.h1, cache.h2, cache.x
    g["Wmu"][:] = h2.T @ d_mean
    g["bmu"][:] = d_mean.sum(axis=0)
    g["Wlogit"][:] = h2.T @ d_logits
    g["blogit"][:] = d_logits.sum(axis=0)
    g["Wv"][:] = h2.T @ d_value
    g["bv"][:] = d_value.sum()

    d_h2 = d_mean @ params["Wmu"].T + d_logits @ params["Wlogit"].T + np.outer(d_value, params["Wv"])
    d_z2 = d_h2 * (1.0 - h2 * h2)
    g["W2"][:] = h1.T @ d_z2
    g["b2"][:] = d_z2.sum(axis=0)
    d_z1 = (d_z2 @ params["W2"].T) * (1.0 - h1 * h1)
    g["W1"][:] = x.T @ d_z1
    g["b1"][:] = d_z1.sum(axis=0)

    grad = np.concatenate([g[n].ravel() for n in params.shapes])
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient")
    return LossTerms(policy_loss, value_loss, ent_mean, float(total)), grad


# alias used by callers that think in forward/backward terms
backward = loss_and_grad


class Adam:
    """Adam with global-norm gradient clipping, operating on a flat vector."""

    def __init__(self, size: int, lr: float = 5e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, clip_norm: float | None = 40.0):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.clip_norm = clip_norm
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: PolicyParameters, grad: np.ndarray) -> float:
        """Update ``params`` in place, bump its version, and return the pre-clip grad norm."""
        norm = float(np.linalg.norm(grad))
        if self.clip_norm is not None and norm > self.clip_norm:
            grad = grad * (self.clip_norm / norm)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        params.flat -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        params.version += 1
        return norm


def save_checkpoint(path: str | Path, params: PolicyParameters, desc_hash: str) -> None:
    meta = {
        "version": params.version,
        "obs_dim": params.obs_dim,
        "n_continuous": params.n_continuous,
        "discrete": list(params.discrete),
        "hidden": list(params.hidden),
        "descriptor_hash": desc_hash,
    }
    with open(path, "wb") as fh:
        np.savez(fh, flat=params.flat, obs_shift=params.obs_shift,
                 obs_scale=params.obs_scale, meta=np.array(json.dumps(meta)))


def load_checkpoint(path: str | Path, expected_hash: str | None = None) -> tuple[PolicyParameters, dict]:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if expected_hash is not None and meta["descriptor_hash"] != expected_hash:
            raise CheckpointMismatch(
                f"checkpoint descriptor hash {meta['descriptor_hash']} does not match "
                f"scenario hash {expected_hash}"
            )
        params = PolicyParameters(meta["obs_dim"], meta["n_continuous"], tuple(meta["discrete"]),
                                  tuple(meta["hidden"]), data["flat"].copy(), meta["version"],
                                  data["obs_shift"].copy(), data["obs_scale"].copy())
    return params, meta
