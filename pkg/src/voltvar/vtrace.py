"""V-trace off-policy targets and the actor-critic loss they feed.

All functions are pure and operate on ``(B, T)`` arrays (batch-major).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .policy import ActionDistribution, entropy, log_prob


@dataclass(frozen=True)
class VTraceConfig:
    gamma: float = 0.99
    rho_bar: float = 1.0
    c_bar: float = 1.0
    entropy_coef: float = 0.01
    value_coef: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not self.rho_bar >= self.c_bar > 0.0:
            raise ValueError("clipping thresholds must satisfy rho_bar >= c_bar > 0")


@dataclass
class TrajectoryBatch:
    """B rows of T consecutive transitions each.

    ``dones[b, t]`` marks that the episode ended after step t, which cuts
    bootstrapping from step t+1.
    """

    obs: np.ndarray  # (B, T, obs_dim)
    continuous: np.ndarray  # (B, T, n_continuous)
    discrete: np.ndarray  # (B, T, n_heads)
    rewards: np.ndarray  # (B, T)
    behavior_logp: np.ndarray  # (B, T)
    dones: np.ndarray  # (B, T)
    bootstrap_obs: np.ndarray  # (B, obs_dim)

    @property
    def shape(self) -> tuple[int, int]:
        return self.rewards.shape

    def flat(self, name: str) -> np.ndarray:
        a = getattr(self, name)
        B, T = self.shape
        return a.reshape((B * T,) + a.shape[2:])


@dataclass
class VTraceBatch:
    vs: np.ndarray  # value targets v_s, (B, T)
    rhos: np.ndarray  # clipped rho_t
    cs: np.ndarray  # clipped c_t
    pg_advantages: np.ndarray  # rho_t * (r_t + gamma * v_{t+1} - V(s_t))


def importance_ratios(log_pi: np.ndarray, log_mu: np.ndarray, rho_bar: float = 1.0,
                      c_bar: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Clipped ratios min(bar, pi/mu), evaluated in log space to avoid overflow."""
    log_pi = np.asarray(log_pi, float)
    log_mu = np.asarray(log_mu, float)
    if not (np.all(np.isfinite(log_pi)) and np.all(np.isfinite(log_mu))):
        raise FloatingPointError("non-finite log-probabilities")
    log_ratio = log_pi - log_mu

    def clipped(bar):
        lb = np.log(bar)
        return np.where(log_ratio >= lb, bar, np.exp(np.minimum(log_ratio, lb)))

    return clipped(rho_bar), clipped(c_bar)


def compute_vtrace(rewards: np.ndarray, values: np.ndarray, bootstrap_value: np.ndarray,
                   dones: np.ndarray, log_pi: np.ndarray, log_mu: np.ndarray,
                   cfg: VTraceConfig = VTraceConfig()) -> VTraceBatch:
    """V-trace targets by backward recursion.

    ``values`` holds V(s_t) for t < T, ``bootstrap_value`` holds V(s_T).
    """
    rewards = np.atleast_2d(np.asarray(rewards, float))
    values = np.atleast_2d(np.asarray(values, float))
    B, T = rewards.shape
    boot = np.asarray(bootstrap_value, float).reshape(B)
    for name, arr in (("rewards", rewards), ("values", values), ("bootstrap", boot)):
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite {name}")
    rhos, cs = importance_ratios(log_pi, log_mu, cfg.rho_bar, cfg.c_bar)
    rhos = rhos.reshape(B, T)
    cs = cs.reshape(B, T)
    disc = cfg.gamma * (1.0 - np.atleast_2d(np.asarray(dones, float)))
    next_values = np.concatenate([values[:, 1:], boot[:, None]], axis=1)
    deltas = rhos * (rewards + disc * next_values - values)

    vs_minus_v = np.zeros((B, T))
    acc = np.zeros(B)
    for t in range(T - 1, -1, -1):
        acc = deltas[:, t] + disc[:, t] * cs[:, t] * acc
        vs_minus_v[:, t] = acc
    vs = values + vs_minus_v
    next_vs = np.concatenate([vs[:, 1:], boot[:, None]], axis=1)
    pg_adv = rhos * (rewards + disc * next_vs - values)
    return VTraceBatch(vs=vs, rhos=rhos, cs=cs, pg_advantages=pg_adv)


@dataclass
class Losses:
    policy_loss: float
    value_loss: float
    entropy_bonus: float
    total: float


def losses(batch: TrajectoryBatch, vt: VTraceBatch, dist_new: ActionDistribution,
           values: np.ndarray, cfg: VTraceConfig = VTraceConfig()) -> Losses:
    """Scalar loss terms for a batch, with mean reduction over all B*T steps.

    ``dist_new`` and ``values`` are the learner's outputs on the flattened
    batch observations.
    """
    logp = log_prob(dist_new, batch.flat("continuous"), batch.flat("discrete"))
    adv = vt.pg_advantages.reshape(-1)
    policy_loss = -float(np.mean(logp * adv))
    value_loss = float(np.mean((vt.vs.reshape(-1) - np.asarray(values).reshape(-1)) ** 2))
    ent = float(np.mean(entropy(dist_new)))
    total = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * ent
    for name, val in (("policy_loss", policy_loss), ("value_loss", value_loss), ("entropy", ent)):
        if not np.isfinite(val):
            raise FloatingPointError(f"non-finite {name}")
    return Losses(policy_loss, value_loss, ent, total)
