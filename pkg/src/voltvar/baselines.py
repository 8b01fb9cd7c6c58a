"""Search baselines over the hybrid action space at a fixed hour.

Both methods treat the environment reward as a black box and work on the flat
action vector ``[continuous..., discrete...]``. Continuous entries live in
[-1, 1]; discrete entries are relaxed to ``[0, k-1]`` and rounded when
evaluated.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .env import ActionVector, VVOEnv, neutral_action


@dataclass
class PsoConfig:
    num_particles: int = 100
    max_iters: int = 50
    w: float = 0.729
    c1: float = 1.49445
    c2: float = 1.49445
    seed: int = 0
    include_neutral: bool = True  # seed particle 0 with the neutral action
    stop_at_zero: bool = True

    def __post_init__(self):
        if self.num_particles < 1:
            raise ValueError("num_particles must be >= 1")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")


@dataclass
class SearchResult:
    method: str
    best_action: ActionVector
    best_reward: float
    evaluations: int
    trace: list[float] = field(default_factory=list)  # best-so-far reward

    @property
    def solved(self) -> bool:
        return self.best_reward == 0.0


def _bounds(env: VVOEnv) -> tuple[np.ndarray, np.ndarray, int]:
    desc = env.descriptor
    nc = desc.n_continuous
    lo = np.concatenate([-np.ones(nc), np.zeros(len(desc.discrete))])
    hi = np.concatenate([np.ones(nc), np.array(desc.discrete, float) - 1.0])
    return lo, hi, nc


def _require_reset(env: VVOEnv) -> None:
    if env.hour is None:
        raise RuntimeError("environment must be reset at the hour to optimize")


def _evaluate(env: VVOEnv, x: np.ndarray, nc: int) -> tuple[float, ActionVector]:
    a = ActionVector.from_flat(x, nc)
    return env.step(a).reward, a


def pso_solve(env: VVOEnv, cfg: PsoConfig = PsoConfig()) -> SearchResult:
    """Global-best PSO with constriction-style coefficients; maximizes reward."""
    _require_reset(env)
    rng = np.random.default_rng(cfg.seed)
    lo, hi, nc = _bounds(env)
    span = hi - lo
    n, d = cfg.num_particles, len(lo)
    x = lo + rng.random((n, d)) * span
    if cfg.include_neutral:
        x[0] = neutral_action(env.net, env.irradiance).flat()
    v = (rng.random((n, d)) * 2.0 - 1.0) * 0.1 * span

    evals = 0
    pbest = x.copy()
    pbest_r = np.empty(n)
    for i in range(n):
        pbest_r[i], _ = _evaluate(env, x[i], nc)
        evals += 1
    g = int(np.argmax(pbest_r))
    gbest, gbest_r = pbest[g].copy(), float(pbest_r[g])
    trace = [gbest_r]

    for _ in range(cfg.max_iters):
        if cfg.stop_at_zero and gbest_r >= 0.0:
            break
        r1 = rng.random((n, d))
        r2 = rng.random((n, d))
        v = cfg.w * v + cfg.c1 * r1 * (pbest - x) + cfg.c2 * r2 * (gbest - x)
        v = np.clip(v, -span, span)
        x = np.clip(x + v, lo, hi)
        for i in range(n):
            r, _ = _evaluate(env, x[i], nc)
            evals += 1
            if r > pbest_r[i]:
                pbest_r[i], pbest[i] = r, x[i].copy()
                if r > gbest_r:
                    gbest_r, gbest = r, x[i].copy()
        trace.append(gbest_r)

    return SearchResult("pso", ActionVector.from_flat(gbest, nc), gbest_r, evals, trace)


def brute_force_solve(env: VVOEnv, budget: int | None = None, seed: int = 0,
                      exhaustive: bool = False) -> SearchResult:
    """Random sampling of ``budget`` actions, or exhaustive enumeration of the
    discrete space with continuous entries held at the neutral action.

    Exhaustive mode visits states in lexicographic order and stops early only
    when ``budget`` is smaller than the state count.
    """
    _require_reset(env)
    lo, hi, nc = _bounds(env)
    desc = env.descriptor
    if exhaustive:
        cont = neutral_action(env.net, env.irradiance).continuous
        states = itertools.product(*(range(k) for k in desc.discrete))
        if budget is not None:
            states = itertools.islice(states, budget)
        candidates = (np.concatenate([cont, np.array(s, float)]) for s in states)
    else:
        if budget is None or budget < 1:
            raise ValueError("random search needs budget >= 1")
        rng = np.random.default_rng(seed)

        def draw():
            for _ in range(budget):
                c = rng.uniform(-1.0, 1.0, nc)
                k = np.array([rng.integers(m) for m in desc.discrete], float)
                yield np.concatenate([c, k])

        candidates = draw()

    best_r, best_x = -np.inf, None
    evals = 0
    trace = []
    for x in candidates:
        r, _ = _evaluate(env, x, nc)
        evals += 1
        if r > best_r:
            best_r, best_x = r, x
        trace.append(float(best_r))
    if best_x is None:
        raise ValueError("budget must allow at least one evaluation")
    return SearchResult("exhaustive" if exhaustive else "random",
                        ActionVector.from_flat(best_x, nc), float(best_r), evals, trace)
