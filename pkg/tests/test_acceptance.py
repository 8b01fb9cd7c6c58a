"""End-to-end acceptance checks.

Every test prints one ``ACCEPTANCE <n> PASS|FAIL`` line with the measured
numbers and the pinned tolerance, then asserts. The lines are repeated in the
terminal summary (see conftest.py).

The training and throughput checks take most of the wall time (about 35 min
on one core). Select the quick ones with ``-m "acceptance and not slow"``.
"""

import itertools
import math
import os
import time

import numpy as np
import pytest

from conftest import two_bus
from voltvar.baselines import PsoConfig, brute_force_solve, pso_solve
from voltvar.env import ActionVector, ExogenousProfile, VVOEnv, decode_action
from voltvar.placement import rank_placements
from voltvar.policy import LossSpec, PolicyParameters, forward, loss_and_grad, mode
from voltvar.powerflow import NetworkState, PowerFlowDiverged, PowerFlowSolver, count_violations, solve
from voltvar.runtime import RuntimeConfig, run_async, run_sync, write_metrics
from voltvar.vtrace import VTraceConfig, compute_vtrace

from test_placement import _oracle_fitness
from test_powerflow import V2_IMAG, V2_REAL, _state, _unit_slack

pytestmark = pytest.mark.acceptance

RESULTS: list[str] = []  # read by conftest.pytest_terminal_summary

# pinned tolerances and budgets
ONPOLICY_TOL = 1e-10
LITERAL_TOL = 1e-12
GRAD_TOL = 1e-4
FD_STEP = 1e-5
PF_ORACLE_TOL = 1e-6
PF_BALANCE_TOL = 1e-8
REWARD_TARGET = -0.01
TRAIN_STEPS = 200_000
TRAIN_SEEDS = (0, 1, 2, 3, 4)
TRAIN_MIN_OK = 4
TRAIN_MAX_S = 600.0
SCALING_TARGET = 2.0
SCALING_WINDOW_S = 60.0
TOY_TRAIN_STEPS = 100_000
TOY_SEED, TOY_HOUR = 7, 3
PSO_SEEDS = range(10)
PSO_MIN_OK = 9


def report(capsys, n, ok, detail):
    line = f"ACCEPTANCE {n:>2} {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    with capsys.disabled():
        print("\n" + line)
    return ok


# --- 1, 2: V-trace -----------------------------------------------------------

def test_01_vtrace_on_policy_reduction(capsys):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    B, T = 8, 50
    for _ in range(20):
        gamma = float(rng.uniform(0.5, 1.0))
        r = rng.normal(size=(B, T))
        V = rng.normal(size=(B, T))
        boot = rng.normal(size=B)
        lp = rng.normal(size=(B, T))
        vt = compute_vtrace(r, V, boot, np.zeros((B, T)), lp, lp, VTraceConfig(gamma, 1.0, 1.0))
        # n-step bootstrapped return, summed directly
        disc = gamma ** np.arange(T + 1)
        for s in range(T):
            ref = r[:, s:] @ disc[: T - s] + disc[T - s] * boot
            worst = max(worst, float(np.max(np.abs(vt.vs[:, s] - ref))))
    elapsed = time.perf_counter() - t0
    ok = worst < ONPOLICY_TOL and elapsed < 1.0
    report(capsys, 1, ok, f"max|err|={worst:.2e} (tol {ONPOLICY_TOL:g}), {elapsed:.2f}s (limit 1s)")
    assert ok


def _literal_rows(r, V, boot, lp, lm, gamma, rho_bar, c_bar):
    """v_s = V_s + sum_{t>=s} gamma^(t-s) (prod_{i=s}^{t-1} c_i) rho_t delta_t for one row.

    Every product is formed explicitly as an (s, t, i) tensor, no recursion."""
    T = len(r)
    ratio = np.exp(lp - lm)
    rho = np.minimum(rho_bar, ratio)
    c = np.minimum(c_bar, ratio)
    Vx = np.append(V, boot)
    delta = rho * (r + gamma * Vx[1:] - Vx[:-1])
    s = np.arange(T)[:, None, None]
    t = np.arange(T)[None, :, None]
    i = np.arange(T)[None, None, :]
    prods = np.prod(np.where((i >= s) & (i < t), c[None, None, :], 1.0), axis=2)
    lag = np.arange(T)[None, :] - np.arange(T)[:, None]
    weights = np.where(lag >= 0, gamma ** np.clip(lag, 0, None), 0.0)
    return V + (weights * prods * delta[None, :]).sum(axis=1)


def test_02_vtrace_matches_literal_sum(capsys):
    rng = np.random.default_rng(2)
    worst = 0.0
    t_rec = 0.0
    for _ in range(1000):
        B, T = int(rng.integers(1, 9)), int(rng.integers(1, 51))
        gamma = float(rng.uniform(0.5, 1.0))
        rho_bar = float(rng.uniform(0.5, 2.0))
        c_bar = float(rng.uniform(0.3, rho_bar))
        r = rng.normal(size=(B, T))
        V = rng.normal(size=(B, T))
        boot = rng.normal(size=B)
        lp = rng.normal(scale=0.5, size=(B, T))
        lm = rng.normal(scale=0.5, size=(B, T))
        t0 = time.perf_counter()
        vt = compute_vtrace(r, V, boot, np.zeros((B, T)), lp, lm, VTraceConfig(gamma, rho_bar, c_bar))
        t_rec += time.perf_counter() - t0
        for b in range(B):
            ref = _literal_rows(r[b], V[b], boot[b], lp[b], lm[b], gamma, rho_bar, c_bar)
            worst = max(worst, float(np.max(np.abs(ref - vt.vs[b]))))
    ok = worst < LITERAL_TOL and t_rec < 10.0
    report(capsys, 2, ok, f"1000 batches, max|err|={worst:.2e} (tol {LITERAL_TOL:g}), "
                          f"recursion {t_rec:.2f}s (limit 10s)")
    assert ok


# --- 3: gradients ------------------------------------------------------------

def test_03_gradient_check(capsys):
    spec = LossSpec(value_coef=0.5, entropy_coef=0.01)
    t0 = time.perf_counter()
    worst, checked = 0.0, 0
    for trial in range(10):
        rng = np.random.default_rng(300 + trial)
        p = PolicyParameters(6, 3, (2, 2, 33), (4, 4))
        p.flat[:] = rng.normal(0, 0.5, p.size)
        n = 8
        batch = (rng.normal(size=(n, 6)), np.tanh(rng.normal(size=(n, 3))),
                 np.stack([rng.integers(k, size=n) for k in (2, 2, 33)], axis=1),
                 rng.normal(size=n), rng.normal(size=n))
        _, grad = loss_and_grad(p, *batch, spec)
        for i in range(p.size):
            q = p.copy()
            q.flat[i] += FD_STEP
            up = loss_and_grad(q, *batch, spec)[0].total
            q.flat[i] -= 2 * FD_STEP
            down = loss_and_grad(q, *batch, spec)[0].total
            fd = (up - down) / (2 * FD_STEP)
            worst = max(worst, abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), 1e-6))
            checked += 1
    elapsed = time.perf_counter() - t0
    ok = worst < GRAD_TOL and elapsed < 30.0
    report(capsys, 3, ok, f"{checked} coords, max rel err={worst:.2e} (tol {GRAD_TOL:g}), "
                          f"{elapsed:.1f}s (limit 30s)")
    assert ok


# --- 4: power flow -----------------------------------------------------------

def test_04_power_flow_fidelity(capsys, feeder13):
    t0 = time.perf_counter()
    empty = _unit_slack(feeder13.with_devices(loads=(), pvs=(), batteries=()))
    flat = solve(empty, NetworkState.neutral(empty))
    ok_a = bool(np.all(flat.vm == 1.0)) and flat.losses_pu == 0.0

    net = two_bus()
    v2 = solve(net, _state(net)).voltage[1]
    err_b = abs(v2 - complex(V2_REAL, V2_IMAG))
    ok_b = err_b < PF_ORACLE_TOL

    rng = np.random.default_rng(4)
    solver = PowerFlowSolver(feeder13)
    n_cont = 2 * len(feeder13.pvs) + len(feeder13.batteries)
    worst = 0.0
    solved = 0
    while solved < 100:
        a = ActionVector(rng.uniform(-1, 1, n_cont),
                         np.array([*rng.integers(0, 2, 2), rng.integers(0, 33)]))
        st = decode_action(a, feeder13, rng.uniform(0, 1), rng.uniform(0.7, 1.3, len(feeder13.loads)))
        try:
            sol = solver.solve(st)
        except PowerFlowDiverged:
            continue  # only feasible states count
        solved += 1
        worst = max(worst, sol.max_mismatch, abs(sol.s_inj.real.sum() - sol.losses_pu))
    ok_c = worst < PF_BALANCE_TOL
    elapsed = time.perf_counter() - t0
    ok = ok_a and ok_b and ok_c and elapsed < 10.0
    report(capsys, 4, ok, f"(a) flat={ok_a} (b) |dV|={err_b:.1e} (tol {PF_ORACLE_TOL:g}) "
                          f"(c) residual={worst:.1e} (tol {PF_BALANCE_TOL:g}), {elapsed:.2f}s (limit 10s)")
    assert ok


# --- 5: placement ------------------------------------------------------------

def test_05_placement_oracle(capsys, feeder13):
    prof = ExogenousProfile.synthetic(0)
    hours = range(24)
    t0 = time.perf_counter()
    ranking = rank_placements(feeder13, None, prof, hours)
    elapsed = time.perf_counter() - t0
    stripped = feeder13.with_devices(pvs=(), batteries=())
    oracle = []
    for b in (b.id for b in feeder13.buses if b.bus_type != "slack"):
        v, l = _oracle_fitness(stripped, b, prof, hours)
        oracle.append((v + l, b, v))
    oracle.sort()
    same_order = ranking.buses == [b for _, b, _ in oracle]
    same_counts = [c.v_total for c in ranking.candidates] == [v for _, _, v in oracle]
    ok = same_order and same_counts and elapsed < 30.0
    report(capsys, 5, ok, f"{len(oracle)} candidates, order match={same_order}, "
                          f"violation counts match={same_counts}, {elapsed:.2f}s (limit 30s)")
    assert ok


# --- 6, 7: training and scaling ---------------------------------------------

@pytest.mark.slow
def test_06_training_convergence(capsys, feeder13):
    rows = []
    for seed in TRAIN_SEEDS:
        cfg = RuntimeConfig(num_actors=4, seed=seed, total_env_steps=TRAIN_STEPS)
        res = run_async(feeder13, ExogenousProfile.synthetic(seed), cfg)
        assert res.error is None, res.error
        best = max(m["mean_episode_reward"] for m in res.metrics)
        hit = next((m["env_steps"] for m in res.metrics
                    if m["mean_episode_reward"] >= REWARD_TARGET), None)
        ok = hit is not None and res.elapsed_s < TRAIN_MAX_S
        rows.append(ok)
        with capsys.disabled():
            print(f"\n  seed {seed}: first >= {REWARD_TARGET} at {hit} steps, best {best:.4f}, "
                  f"final {res.final_mean_reward:.4f}, {res.elapsed_s:.0f}s, stopped by {res.stopped_by}")
    n_ok = sum(rows)
    ok = n_ok >= TRAIN_MIN_OK
    report(capsys, 6, ok, f"{n_ok}/{len(rows)} seeds reach batch mean >= {REWARD_TARGET} within "
                          f"{TRAIN_STEPS} steps and {TRAIN_MAX_S:.0f}s (need {TRAIN_MIN_OK}); "
                          f"host cores={os.cpu_count()}")
    assert ok


def _throughput(net, actors):
    cfg = RuntimeConfig(num_actors=actors, seed=0, total_env_steps=10**9,
                        max_seconds=SCALING_WINDOW_S, stop_threshold=None)
    res = run_async(net, ExogenousProfile.synthetic(0), cfg)
    assert res.error is None, res.error
    return res.consumed_steps / res.elapsed_s, res.elapsed_s


@pytest.mark.slow
def test_07_throughput_scaling(capsys, feeder13):
    one, t1 = _throughput(feeder13, 1)
    four, t4 = _throughput(feeder13, 4)
    ratio = four / one
    ok = ratio >= SCALING_TARGET and min(t1, t4) >= SCALING_WINDOW_S
    report(capsys, 7, ok, f"1 actor {one:.0f} steps/s ({t1:.0f}s), 4 actors {four:.0f} steps/s "
                          f"({t4:.0f}s), ratio {ratio:.2f} (need {SCALING_TARGET}); "
                          f"host cores={os.cpu_count()}")
    assert ok


# --- 8: queue accounting -----------------------------------------------------

def test_08_queue_accounting(capsys, feeder13):
    cfg = RuntimeConfig(num_actors=4, seed=8, total_env_steps=20_000)
    res = run_async(feeder13, ExogenousProfile.synthetic(8), cfg)
    fifo = res.consumed_seqs == list(range(len(res.consumed_seqs)))
    balanced = res.produced_steps == res.consumed_steps + res.queued_steps_at_shutdown
    ok = res.error is None and fifo and balanced
    report(capsys, 8, ok, f"FIFO={fifo} over {len(res.consumed_seqs)} fragments; produced "
                          f"{res.produced_steps} = consumed {res.consumed_steps} + queued "
                          f"{res.queued_steps_at_shutdown}: {balanced}")
    assert ok


# --- 9: baselines on the toy -------------------------------------------------

def _toy_env(toy):
    env = VVOEnv(toy, ExogenousProfile.synthetic(TOY_SEED), seed=TOY_SEED)
    env.reset(hour=TOY_HOUR)
    return env


@pytest.mark.slow
def test_09_baseline_sanity(capsys, toy):
    env = _toy_env(toy)
    exhaustive = brute_force_solve(env, exhaustive=True)
    # independent enumeration straight through the power-flow solver
    best = -math.inf
    for k in itertools.product(*(range(n) for n in env.descriptor.discrete)):
        st = decode_action(ActionVector(exhaustive.best_action.continuous, np.array(k)),
                           toy, env.irradiance, env.load_factors)
        try:
            count, frac = count_violations(solve(toy, st))
            best = max(best, -frac if count else 0.0)
        except PowerFlowDiverged:
            best = max(best, -1.0)
    ok_ex = exhaustive.evaluations == 132 and exhaustive.best_reward == best

    cfg = RuntimeConfig(num_actors=4, seed=0, total_env_steps=TOY_TRAIN_STEPS)
    res = run_async(toy, ExogenousProfile.synthetic(0), cfg)
    assert res.error is None, res.error
    obs = _toy_env(toy).observation
    c, k = mode(forward(res.params, obs)[0])
    policy_r = env.step(ActionVector(c[0], k[0])).reward
    ok_pol = policy_r == exhaustive.best_reward == 0.0

    hits = 0
    for seed in PSO_SEEDS:
        r = pso_solve(_toy_env(toy), PsoConfig(num_particles=100, seed=seed)).best_reward
        hits += r == exhaustive.best_reward
    ok_pso = hits >= PSO_MIN_OK
    ok = ok_ex and ok_pol and ok_pso
    report(capsys, 9, ok, f"exhaustive best {exhaustive.best_reward} (oracle {best}), policy "
                          f"{policy_r} at {k[0].tolist()}, PSO matched {hits}/{len(PSO_SEEDS)} "
                          f"(need {PSO_MIN_OK})")
    assert ok


# --- 10: determinism ---------------------------------------------------------

def test_10_sync_determinism(capsys, feeder13, tmp_path):
    blobs = []
    for k in range(2):
        cfg = RuntimeConfig(num_actors=1, seed=10, total_env_steps=10_000, sync=True)
        res = run_sync(feeder13, ExogenousProfile.synthetic(10), cfg)
        path = tmp_path / f"metrics{k}.csv"
        write_metrics(path, res.metrics)
        blobs.append(path.read_bytes())
    ok = blobs[0] == blobs[1] and len(res.metrics) == 4
    report(capsys, 10, ok, f"{len(res.metrics)} rows, {len(blobs[0])} bytes, identical={blobs[0] == blobs[1]}")
    assert ok
