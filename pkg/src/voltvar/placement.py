"""Siting of colocated PV + battery pairs by a year-long fitness score.

For every candidate bus a PV of fixed rating (and an idle battery) is added to
the feeder, the power flow is solved hour by hour and the fitness is

    fitness = (number of bus-hours outside [0.95, 1.05] pu) + (sum of hourly losses in pu)

Lower is better. The two addends have different units; both are reported.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .env import ExogenousProfile
from .grid import TAP_NEUTRAL, Battery, FeederNetwork, PvSystem
from .powerflow import NetworkState, PowerFlowDiverged, PowerFlowSolver, count_violations

DEFAULT_RATING_KW = 100.0


@dataclass(frozen=True)
class PlacementCandidate:
    pv_bus: str
    battery_bus: str
    fitness: float
    v_total: int
    l_total: float
    diverged_hours: tuple[int, ...] = ()

    def sort_key(self):
        return (self.fitness, self.pv_bus, self.battery_bus)


@dataclass
class PlacementRanking:
    candidates: list[PlacementCandidate]
    hours: tuple[int, ...]
    mode: str = "independent"
    placed: list[str] = field(default_factory=list)  # sequential mode: buses in placement order

    def __len__(self) -> int:
        return len(self.candidates)

    @property
    def buses(self) -> list[str]:
        return [c.pv_bus for c in self.candidates]


def check_hours(hours: Iterable[int], profile: ExogenousProfile) -> tuple[int, ...]:
    hours = tuple(int(h) for h in hours)
    if not hours:
        raise ValueError("empty horizon: at least one hour is required")
    bad = [h for h in hours if not 0 <= h < profile.hours]
    if bad:
        raise ValueError(f"hours outside 0..{profile.hours - 1}: {bad[:5]}")
    return hours


def strip_ders(net: FeederNetwork) -> FeederNetwork:
    return net.with_devices(pvs=(), batteries=())


def _with_pair(net: FeederNetwork, pv_bus: str, battery_bus: str, rating_kw: float) -> FeederNetwork:
    pv = PvSystem(pv_bus, rating_kw, 0.0, rating_kw, 0.0, 0.0)
    bt = Battery(battery_bus, -rating_kw, rating_kw)
    return net.with_devices(pvs=net.pvs + (pv,), batteries=net.batteries + (bt,))


def hourly_state(net: FeederNetwork, irradiance: float, load_factors: np.ndarray) -> NetworkState:
    """Taps at mid position, capacitors at their scenario status, every PV at
    ``min(p_max, pmpp * irradiance)`` and unity power factor, batteries idle."""
    idx = net.bus_index
    p = np.zeros(net.n_buses)
    q = np.zeros(net.n_buses)
    for ld, f in zip(net.loads, load_factors):
        p[idx[ld.bus]] -= net.kw_to_pu(ld.base_p_kw * f)
        q[idx[ld.bus]] -= net.kw_to_pu(ld.base_q_kvar * f)
    pv_kw = np.array([min(pv.p_max_kw, pv.pmpp_kw * irradiance) for pv in net.pvs])
    for pv, kw in zip(net.pvs, pv_kw):
        p[idx[pv.bus]] += net.kw_to_pu(kw)
    return NetworkState(
        tap_indices=np.full(len(net.transformers), TAP_NEUTRAL, dtype=int),
        cap_status=np.array([c.status for c in net.capacitors], dtype=int),
        p_inj=p,
        q_inj=q,
        pv_p_kw=pv_kw,
        pv_q_kvar=np.zeros(len(net.pvs)),
        batt_p_kw=np.zeros(len(net.batteries)),
    )


def evaluate_fitness(net: FeederNetwork, pv_bus: str, battery_bus: str,
                     profile: ExogenousProfile, hours: Sequence[int],
                     rating_kw: float = DEFAULT_RATING_KW,
                     keep_existing: bool = False) -> PlacementCandidate:
    """Fitness of one candidate pair over ``hours``.

    Existing PVs and batteries are removed first unless ``keep_existing``.
    A diverged hour counts every non-slack bus as violating and adds no loss.
    """
    for b in (pv_bus, battery_bus):
        if b not in net.bus_index:
            raise ValueError(f"unknown bus {b!r}")
    hours = check_hours(hours, profile)
    base = net if keep_existing else strip_ders(net)
    trial = _with_pair(base, pv_bus, battery_bus, rating_kw)
    solver = PowerFlowSolver(trial)
    n_loads = len(trial.loads)
    v_total = 0
    l_total = 0.0
    diverged = []
    for h in hours:
        state = hourly_state(trial, profile.irradiance_at(h), profile.load_factors(h, n_loads))
        try:
            sol = solver.solve(state)
        except PowerFlowDiverged:
            v_total += trial.n_buses - 1
            diverged.append(h)
            continue
        v_total += count_violations(sol)[0]
        l_total += sol.losses_pu
    return PlacementCandidate(pv_bus, battery_bus, float(v_total) + l_total, v_total, l_total,
                              tuple(diverged))


def _evaluate_job(args):
    net, bus, profile, hours, rating, keep = args
    return evaluate_fitness(net, bus, bus, profile, hours, rating, keep)


def _evaluate_all(net, buses, profile, hours, rating, keep, workers):
    jobs = [(net, b, profile, hours, rating, keep) for b in buses]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_evaluate_job, jobs))
    return [_evaluate_job(j) for j in jobs]


def default_workers() -> int:
    cap = os.environ.get("VVO_THREADS")
    return max(1, int(cap)) if cap else 1


def rank_placements(net: FeederNetwork, candidates: Sequence[str] | None,
                    profile: ExogenousProfile, hours: Sequence[int], top_k: int | None = None,
                    rating_kw: float = DEFAULT_RATING_KW, mode: str = "independent",
                    keep_existing: bool = False, workers: int | None = None) -> PlacementRanking:
    """Rank colocated pairs by ascending fitness (ties by bus id).

    ``candidates=None`` means every non-slack bus. In ``sequential`` mode the
    best pair is added to the feeder before the remaining candidates are
    scored again, ``top_k`` times (greedy placement).
    """
    if candidates is None:
        candidates = [b.id for b in net.buses if b.bus_type != "slack"]
    buses = sorted(set(candidates))
    if not buses:
        raise ValueError("no candidate buses")
    hours = check_hours(hours, profile)
    if mode not in ("independent", "sequential"):
        raise ValueError(f"unknown placement mode {mode!r}")
    k = len(buses) if top_k is None else max(1, min(int(top_k), len(buses)))
    workers = default_workers() if workers is None else max(1, workers)

    if mode == "independent":
        scored = _evaluate_all(net, buses, profile, hours, rating_kw, keep_existing, workers)
        ranked = sorted(scored, key=PlacementCandidate.sort_key)[:k]
        return PlacementRanking(ranked, hours, mode, [c.pv_bus for c in ranked])

    current = net if keep_existing else strip_ders(net)
    remaining = list(buses)
    picked: list[PlacementCandidate] = []
    for _ in range(k):
        scored = _evaluate_all(current, remaining, profile, hours, rating_kw, True, workers)
        best = min(scored, key=PlacementCandidate.sort_key)
        picked.append(best)
        remaining.remove(best.pv_bus)
        current = _with_pair(current, best.pv_bus, best.battery_bus, rating_kw)
    return PlacementRanking(picked, hours, mode, [c.pv_bus for c in picked])
