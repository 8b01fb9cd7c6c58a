"""Steady-state AC power flow (Newton-Raphson, polar form) for radial feeders."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import TAP_NEUTRAL, V_MAX_PU, V_MIN_PU, FeederNetwork, tap_ratio

TOLERANCE = 1e-8
MAX_ITER = 50


class PowerFlowDiverged(RuntimeError):
    def __init__(self, message: str, mismatch: float, iterations: int):
        super().__init__(message)
        self.mismatch = mismatch
        self.iterations = iterations


@dataclass
class NetworkState:
    """Controllable settings plus per-bus net injections (per-unit, loads negative)."""

    tap_indices: np.ndarray
    cap_status: np.ndarray
    p_inj: np.ndarray
    q_inj: np.ndarray
    # device setpoints in kW/kvar, carried along for reporting
    pv_p_kw: np.ndarray = field(default_factory=lambda: np.zeros(0))
    pv_q_kvar: np.ndarray = field(default_factory=lambda: np.zeros(0))
    batt_p_kw: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def neutral(cls, net: FeederNetwork) -> "NetworkState":
        n = net.n_buses
        return cls(
            tap_indices=np.full(len(net.transformers), TAP_NEUTRAL, dtype=int),
            cap_status=np.zeros(len(net.capacitors), dtype=int),
            p_inj=np.zeros(n),
            q_inj=np.zeros(n),
        )


@dataclass
class PowerFlowSolution:
    vm: np.ndarray
    va: np.ndarray
    s_inj: np.ndarray  # complex injections computed from the solved voltages
    losses_pu: float
    iterations: int
    max_mismatch: float
    slack_index: int
    bus_ids: list[str]

    @property
    def voltage(self) -> np.ndarray:
        return self.vm * np.exp(1j * self.va)

    @property
    def slack_power(self) -> complex:
        return complex(self.s_inj[self.slack_index])


def _branch_admittances(net: FeederNetwork, state: NetworkState):
    """Yield (i, j, y_ff, y_ft, y_tf, y_tt, y_series, gain) for every branch."""
    idx = net.bus_index
    for ln in net.lines:
        y = 1.0 / complex(ln.resistance_pu, ln.reactance_pu)
        half = 0.5j * ln.shunt_susceptance_pu
        yield idx[ln.from_bus], idx[ln.to_bus], y + half, -y, -y, y + half, y, 1.0
    for k, tr in enumerate(net.transformers):
        t = tap_ratio(tr, int(state.tap_indices[k]))
        y = 1.0 / complex(tr.resistance_pu, tr.reactance_pu)
        yield idx[tr.from_bus], idx[tr.to_bus], y * t * t, -y * t, -y * t, y, y, t


def build_admittance(net: FeederNetwork, state: NetworkState) -> np.ndarray:
    """Dense bus admittance matrix including taps, line charging and capacitors."""
    n = net.n_buses
    Y = np.zeros((n, n), dtype=complex)
    for i, j, yff, yft, ytf, ytt, _, _ in _branch_admittances(net, state):
        Y[i, i] += yff
        Y[i, j] += yft
        Y[j, i] += ytf
        Y[j, j] += ytt
    idx = net.bus_index
    for k, cap in enumerate(net.capacitors):
        if state.cap_status[k]:
            Y[idx[cap.bus], idx[cap.bus]] += 1j * net.kw_to_pu(cap.rated_kvar)
    return Y


def _dS_dV(Y: np.ndarray, V: np.ndarray):
    I = Y @ V
    Vnorm = V / np.abs(V)
    dS_dVm = V[:, None] * np.conj(Y * Vnorm[None, :]) + np.diag(np.conj(I) * Vnorm)
    dS_dVa = 1j * V[:, None] * np.conj(np.diag(I) - Y * V[None, :])
    return dS_dVm, dS_dVa


class PowerFlowSolver:
    """Newton-Raphson solver bound to one network.

    Caches the tap-independent part of the admittance matrix and index
    arrays, so give each worker its own instance.
    """

    def __init__(self, net: FeederNetwork, tol: float = TOLERANCE, max_iter: int = MAX_ITER):
        self.net = net
        self.tol = tol
        self.max_iter = max_iter
        self.slack = net.slack_index
        n = net.n_buses
        self.pq = np.array([i for i in range(n) if i != self.slack], dtype=int)
        self._ix = np.ix_(self.pq, self.pq)
        idx = net.bus_index
        self._y_lines = np.zeros((n, n), dtype=complex)
        for ln in net.lines:
            i, j = idx[ln.from_bus], idx[ln.to_bus]
            y = 1.0 / complex(ln.resistance_pu, ln.reactance_pu)
            half = 0.5j * ln.shunt_susceptance_pu
            self._y_lines[i, i] += y + half
            self._y_lines[j, j] += y + half
            self._y_lines[i, j] -= y
            self._y_lines[j, i] -= y
        self._xfmr = [(idx[t.from_bus], idx[t.to_bus], 1.0 / complex(t.resistance_pu, t.reactance_pu), t)
                      for t in net.transformers]
        self._caps = [(idx[c.bus], net.kw_to_pu(c.rated_kvar)) for c in net.capacitors]
        self._v0 = np.ones(n, dtype=complex)
        self._v0[self.slack] = net.buses[self.slack].v_set_pu

    def admittance(self, state: NetworkState) -> np.ndarray:
        Y = self._y_lines.copy()
        for k, (i, j, y, tr) in enumerate(self._xfmr):
            t = tap_ratio(tr, int(state.tap_indices[k]))
            Y[i, i] += y * t * t
            Y[i, j] -= y * t
            Y[j, i] -= y * t
            Y[j, j] += y
        for k, (i, b) in enumerate(self._caps):
            if state.cap_status[k]:
                Y[i, i] += 1j * b
        return Y

    def solve(self, state: NetworkState) -> PowerFlowSolution:
        net = self.net
        Y = self.admittance(state)
        s_spec = np.asarray(state.p_inj, float) + 1j * np.asarray(state.q_inj, float)
        pq, ix = self.pq, self._ix
        npq = len(pq)
        V = self._v0.copy()
        J = np.empty((2 * npq, 2 * npq))

        def mismatch(V):
            d = (V * np.conj(Y @ V))[pq] - s_spec[pq]
            return np.concatenate([d.real, d.imag])

        F = mismatch(V)
        err = float(np.max(np.abs(F))) if npq else 0.0
        it = 0
        while err > self.tol:
            if it >= self.max_iter:
                raise PowerFlowDiverged(
                    f"no convergence after {it} iterations (mismatch {err:.3e})", err, it
                )
            dS_dVm, dS_dVa = _dS_dV(Y, V)
            a, m = dS_dVa[ix], dS_dVm[ix]
            J[:npq, :npq] = a.real
            J[:npq, npq:] = m.real
            J[npq:, :npq] = a.imag
            J[npq:, npq:] = m.imag
            try:
                dx = np.linalg.solve(J, -F)
            except np.linalg.LinAlgError:
                raise PowerFlowDiverged("singular Jacobian", err, it) from None
            it += 1
            va = np.angle(V)
            vm = np.abs(V)
            va[pq] += dx[:npq]
            vm[pq] += dx[npq:]
            if not np.all(np.isfinite(vm)) or np.any(vm[pq] <= 0):
                raise PowerFlowDiverged("voltage collapsed during iteration", err, it)
            V = vm * np.exp(1j * va)
            F = mismatch(V)
            err = float(np.max(np.abs(F)))
            if not np.isfinite(err):
                raise PowerFlowDiverged("non-finite mismatch", err, it)

        sol = PowerFlowSolution(
            vm=np.abs(V),
            va=np.angle(V),
            s_inj=V * np.conj(Y @ V),
            losses_pu=0.0,
            iterations=it,
            max_mismatch=err,
            slack_index=self.slack,
            bus_ids=net.bus_ids,
        )
        sol.losses_pu = total_losses(sol, net, state)
        return sol


def solve(net: FeederNetwork, state: NetworkState) -> PowerFlowSolution:
    return PowerFlowSolver(net).solve(state)


def branch_flows(sol: PowerFlowSolution, net: FeederNetwork, state: NetworkState):
    """Complex power entering each branch at its from and to ends, in branch order."""
    V = sol.voltage
    out = []
    for i, j, yff, yft, ytf, ytt, _, _ in _branch_admittances(net, state):
        s_from = V[i] * np.conj(yff * V[i] + yft * V[j])
        s_to = V[j] * np.conj(ytf * V[i] + ytt * V[j])
        out.append((s_from, s_to))
    return out


def total_losses(sol: PowerFlowSolution, net: FeederNetwork, state: NetworkState) -> float:
    """Active losses: sum of I^2 R over the series element of every branch."""
    V = sol.voltage
    loss = 0.0
    for i, j, _, _, _, _, y, t in _branch_admittances(net, state):
        current = y * (t * V[i] - V[j])
        z = 1.0 / y
        loss += abs(current) ** 2 * z.real
    return float(loss)


def count_violations(sol: PowerFlowSolution, v_min: float = V_MIN_PU,
                     v_max: float = V_MAX_PU) -> tuple[int, float]:
    """Non-slack buses strictly outside [v_min, v_max], as count and fraction."""
    mask = np.ones(len(sol.vm), dtype=bool)
    mask[sol.slack_index] = False
    vm = sol.vm[mask]
    if vm.size == 0:
        return 0, 0.0
    count = int(np.count_nonzero((vm < v_min) | (vm > v_max)))
    return count, count / vm.size
