"""Volt-VAR control as a one-step decision problem over a feeder.

Observations are ``[V_1..V_N, D_1..D_M]``: per-unit voltage magnitudes of all
buses followed by per-unit active demand of each load. Actions are a hybrid
vector of normalized continuous setpoints (PV kvar, PV kW, battery kW, all in
[-1, 1]) and discrete device positions (capacitor on/off, tap index).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import TAP_NEUTRAL, FeederNetwork
from .powerflow import (
    NetworkState,
    PowerFlowDiverged,
    PowerFlowSolver,
    count_violations,
)

HOURS_PER_YEAR = 8760
DIVERGED_REWARD = -1.0


def clear_sky(hour: np.ndarray | int) -> np.ndarray:
    h = np.asarray(hour) % 24
    return np.maximum(0.0, np.sin(np.pi * (h - 6) / 12.0))


@dataclass
class ExogenousProfile:
    """Hourly irradiance in [0, 1] and the source of per-load demand factors.

    Load factors are Gaussian(1, sigma) truncated at zero. When ``load_seeds``
    is set (one seed per hour) they are reproducible per hour; otherwise the
    caller's generator draws them.
    """

    irradiance: np.ndarray
    load_sigma: float = 0.1
    load_seeds: np.ndarray | None = None
    seed: int = 0

    @classmethod
    def synthetic(cls, seed: int = 0, load_sigma: float = 0.1,
                  hours: int = HOURS_PER_YEAR) -> "ExogenousProfile":
        rng = np.random.default_rng(seed)
        days = -(-hours // 24)
        cloud = rng.uniform(0.6, 1.0, size=days)
        h = np.arange(hours)
        return cls(irradiance=clear_sky(h) * cloud[h // 24], load_sigma=load_sigma, seed=seed)

    @classmethod
    def from_csv(cls, irradiance_csv: str | Path, load_csv: str | Path | None = None,
                 load_sigma: float = 0.1) -> "ExogenousProfile":
        irr = _read_hourly(irradiance_csv, "irradiance", float)
        if np.any(irr < 0) or np.any(irr > 1):
            raise ValueError("irradiance must lie in [0, 1]")
        seeds = None
        if load_csv is not None:
            seeds = _read_hourly(load_csv, "load_factor_seed", int)
            if len(seeds) != len(irr):
                raise ValueError("load seed profile must cover the same hours as irradiance")
        return cls(irradiance=irr, load_sigma=load_sigma, load_seeds=seeds)

    @property
    def hours(self) -> int:
        return len(self.irradiance)

    def irradiance_at(self, hour: int) -> float:
        return float(self.irradiance[hour % self.hours])

    def load_factors(self, hour: int, n: int, rng: np.random.Generator | None = None) -> np.ndarray:
        if self.load_seeds is not None:
            rng = np.random.default_rng(int(self.load_seeds[hour % self.hours]))
        elif rng is None:
            rng = np.random.default_rng([self.seed, hour])
        return np.maximum(0.0, rng.normal(1.0, self.load_sigma, size=n))


def _read_hourly(path, column, kind) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "hour" not in rows[0] or column not in rows[0]:
        raise ValueError(f"{path}: expected columns hour,{column}")
    rows.sort(key=lambda r: int(r["hour"]))
    if [int(r["hour"]) for r in rows] != list(range(len(rows))):
        raise ValueError(f"{path}: hours must be contiguous from 0")
    return np.array([kind(r[column]) for r in rows])


@dataclass(frozen=True)
class ActionSpaceDescriptor:
    n_pv: int
    n_batt: int
    n_cap: int
    n_tap: int
    obs_dim: int

    @property
    def n_continuous(self) -> int:
        return 2 * self.n_pv + self.n_batt

    @property
    def discrete(self) -> tuple[int, ...]:
        return (2,) * self.n_cap + (TAP_NEUTRAL * 2 + 1,) * self.n_tap

    def sizes(self) -> tuple[int, list[int]]:
        return self.n_continuous, list(self.discrete)


def action_space_descriptor(net: FeederNetwork) -> ActionSpaceDescriptor:
    return ActionSpaceDescriptor(
        n_pv=len(net.pvs),
        n_batt=len(net.batteries),
        n_cap=len(net.capacitors),
        n_tap=len(net.transformers),
        obs_dim=net.n_buses + len(net.loads),
    )


@dataclass
class ActionVector:
    continuous: np.ndarray
    discrete: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.continuous, float), np.asarray(self.discrete, float)])

    @classmethod
    def from_flat(cls, x: np.ndarray, n_continuous: int) -> "ActionVector":
        x = np.asarray(x, float)
        return cls(x[:n_continuous].copy(), np.rint(x[n_continuous:]).astype(int))


def _affine(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    return lo + 0.5 * (np.clip(x, -1.0, 1.0) + 1.0) * (hi - lo)


def _inverse_affine(v: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    span = np.where(hi > lo, hi - lo, 1.0)
    return np.clip(2.0 * (v - lo) / span - 1.0, -1.0, 1.0)


def device_bounds(net: FeederNetwork, irradiance: float) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Setpoint bounds at a given irradiance; PV kW is capped at pmpp * irradiance."""
    pv_p_hi = np.array([min(pv.p_max_kw, pv.pmpp_kw * irradiance) for pv in net.pvs])
    pv_p_lo = np.minimum(np.array([pv.p_min_kw for pv in net.pvs]), pv_p_hi)
    return {
        "pv_q": (np.array([pv.q_min_kvar for pv in net.pvs]), np.array([pv.q_max_kvar for pv in net.pvs])),
        "pv_p": (pv_p_lo.reshape(-1), pv_p_hi.reshape(-1)),
        "batt_p": (np.array([b.p_min_kw for b in net.batteries]), np.array([b.p_max_kw for b in net.batteries])),
    }


def decode_action(action: ActionVector, net: FeederNetwork, irradiance: float,
                  load_factors: np.ndarray | None = None) -> NetworkState:
    """Map a normalized action onto device setpoints and per-bus injections.

    Out-of-range entries are clamped, never rejected.
    """
    desc = action_space_descriptor(net)
    npv, nb = desc.n_pv, desc.n_batt
    cont = np.asarray(action.continuous, float)
    disc = np.asarray(action.discrete)
    if cont.shape != (desc.n_continuous,) or disc.shape != (len(desc.discrete),):
        raise ValueError(
            f"action shape mismatch: expected {desc.n_continuous} continuous and "
            f"{len(desc.discrete)} discrete entries"
        )
    bounds = device_bounds(net, irradiance)
    q_kvar = _affine(cont[:npv], *bounds["pv_q"])
    p_kw = _affine(cont[npv:2 * npv], *bounds["pv_p"])
    b_kw = _affine(cont[2 * npv:2 * npv + nb], *bounds["batt_p"])
    caps = np.clip(np.rint(disc[:desc.n_cap]), 0, 1).astype(int)
    taps = np.clip(np.rint(disc[desc.n_cap:]), 0, 2 * TAP_NEUTRAL).astype(int)

    idx = net.bus_index
    p = np.zeros(net.n_buses)
    q = np.zeros(net.n_buses)
    if load_factors is None:
        load_factors = np.ones(len(net.loads))
    for ld, f in zip(net.loads, load_factors):
        p[idx[ld.bus]] -= net.kw_to_pu(ld.base_p_kw * f)
        q[idx[ld.bus]] -= net.kw_to_pu(ld.base_q_kvar * f)
    for k, pv in enumerate(net.pvs):
        p[idx[pv.bus]] += net.kw_to_pu(p_kw[k])
        q[idx[pv.bus]] += net.kw_to_pu(q_kvar[k])
    for k, bt in enumerate(net.batteries):
        p[idx[bt.bus]] += net.kw_to_pu(b_kw[k])
    return NetworkState(
        tap_indices=taps, cap_status=caps, p_inj=p, q_inj=q,
        pv_p_kw=p_kw, pv_q_kvar=q_kvar, batt_p_kw=b_kw,
    )


def neutral_action(net: FeederNetwork, irradiance: float = 1.0) -> ActionVector:
    """Taps at mid position, capacitors off, PV at unity power factor and full
    available output, batteries idle."""
    bounds = device_bounds(net, irradiance)
    q = _inverse_affine(np.zeros(len(net.pvs)), *bounds["pv_q"])
    p = np.ones(len(net.pvs))
    b = _inverse_affine(np.zeros(len(net.batteries)), *bounds["batt_p"])
    disc = np.concatenate([
        np.zeros(len(net.capacitors), dtype=int),
        np.full(len(net.transformers), TAP_NEUTRAL, dtype=int),
    ])
    return ActionVector(np.concatenate([q, p, b]), disc)


@dataclass
class StepOutcome:
    observation: np.ndarray
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


class VVOEnv:
    """One-step Volt-VAR environment; each instance owns its own solver."""

    def __init__(self, net: FeederNetwork, profile: ExogenousProfile | None = None,
                 seed: int | None = 0):
        self.net = net
        self.profile = profile if profile is not None else ExogenousProfile.synthetic(0)
        self.descriptor = action_space_descriptor(net)
        self.solver = PowerFlowSolver(net)
        self.rng = np.random.default_rng(seed)
        self.hour: int | None = None
        self.irradiance = 0.0
        self.load_factors = np.ones(len(net.loads))
        self.observation: np.ndarray | None = None
        self.baseline_converged = True

    @property
    def obs_dim(self) -> int:
        return self.descriptor.obs_dim

    def _demands(self) -> np.ndarray:
        return np.array([self.net.kw_to_pu(ld.base_p_kw) for ld in self.net.loads]) * self.load_factors

    def _observe(self, vm: np.ndarray) -> np.ndarray:
        return np.concatenate([vm, self._demands()])

    def reset(self, seed: int | None = None, hour: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        if hour is None:
            hour = int(self.rng.integers(self.profile.hours))
        elif not 0 <= hour < self.profile.hours:
            raise ValueError(f"hour {hour} outside profile range 0..{self.profile.hours - 1}")
        self.hour = int(hour)
        self.irradiance = self.profile.irradiance_at(self.hour)
        self.load_factors = self.profile.load_factors(self.hour, len(self.net.loads), self.rng)
        state = self.decode(neutral_action(self.net, self.irradiance))
        try:
            vm = self.solver.solve(state).vm
            self.baseline_converged = True
        except PowerFlowDiverged:
            vm = np.ones(self.net.n_buses)
            self.baseline_converged = False
        self.observation = self._observe(vm)
        return self.observation.copy()

    def decode(self, action: ActionVector) -> NetworkState:
        return decode_action(action, self.net, self.irradiance, self.load_factors)

    def step(self, action: ActionVector) -> StepOutcome:
        """Apply an action at the current hour. The episode always ends here;
        calling step again re-evaluates against the same exogenous conditions."""
        if self.hour is None:
            raise RuntimeError("reset() must be called before step()")
        state = self.decode(action)
        try:
            sol = self.solver.solve(state)
        except PowerFlowDiverged as exc:
            n = self.net.n_buses - 1
            return StepOutcome(
                observation=self._observe(np.ones(self.net.n_buses)),
                reward=DIVERGED_REWARD,
                done=True,
                info={"violation_count": n, "losses_pu": float("nan"),
                      "converged": False, "mismatch": exc.mismatch, "state": state},
            )
        count, frac = count_violations(sol)
        return StepOutcome(
            observation=self._observe(sol.vm),
            reward=-frac if count else 0.0,
            done=True,
            info={"violation_count": count, "losses_pu": sol.losses_pu,
                  "converged": True, "state": state, "solution": sol},
        )
