"""Actor-learner training loop.

Actors roll fixed-length fragments with a (possibly stale) snapshot of the
policy and push them into one bounded FIFO queue; a single learner drains the
queue, corrects for policy lag with V-trace and takes one Adam step per train
batch.

Two execution modes share the same actor and learner code:

* ``sync``: everything runs in-process, actors are stepped round-robin with the
  current parameters. Deterministic for a fixed seed.
* async (default): each actor is a separate process; parameters are published
  through shared memory and fragments travel through a managed queue.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import queue as queue_mod
import time
import traceback
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import multiprocessing as mp
import numpy as np

from .env import ActionVector, ExogenousProfile, VVOEnv, action_space_descriptor
from .grid import FeederNetwork
from .policy import (
    Adam,
    LossSpec,
    PolicyParameters,
    descriptor_hash,
    forward,
    log_prob,
    loss_and_grad,
    sample,
    save_checkpoint,
)
from .vtrace import TrajectoryBatch, VTraceConfig, compute_vtrace

log = logging.getLogger(__name__)

METRICS_COLUMNS = [
    "iteration",
    "env_steps",
    "mean_episode_reward",
    "steps_per_sec",
    "queue_occupancy",
    "version_lag",
    "wall_clock_s",
]


@dataclass
class RuntimeConfig:
    num_actors: int = 4
    learner_queue_capacity: int = 16
    rollout_fragment_length: int = 50
    train_batch_size: int = 2500
    learning_rate: float = 5e-4
    grad_clip_norm: float = 40.0
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    num_sgd_iter: int = 1
    total_env_steps: int = 200_000
    seed: int = 0
    gamma: float = 0.99
    rho_bar: float = 1.0
    c_bar: float = 1.0
    hidden: tuple[int, int] = (256, 256)
    load_sigma: float = 0.1
    sync: bool = False
    max_seconds: float | None = None
    stop_window: int = 1000
    stop_threshold: float | None = -1e-6

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if self.learner_queue_capacity < 1:
            raise ValueError("learner_queue_capacity must be >= 1")
        if self.rollout_fragment_length < 1 or self.train_batch_size % self.rollout_fragment_length:
            raise ValueError("train_batch_size must be a multiple of rollout_fragment_length")
        if self.num_actors < 1:
            raise ValueError("num_actors must be >= 1")
        if self.total_env_steps < 0:
            raise ValueError("total_env_steps must be >= 0")

    @property
    def fragments_per_batch(self) -> int:
        return self.train_batch_size // self.rollout_fragment_length

    def vtrace(self) -> VTraceConfig:
        return VTraceConfig(self.gamma, self.rho_bar, self.c_bar, self.entropy_coef, self.value_coef)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def effective_actors(requested: int) -> int:
    """Cap the actor count by ``VVO_THREADS`` when set."""
    cap = os.environ.get("VVO_THREADS")
    if cap:
        return max(1, min(requested, int(cap)))
    return requested


@dataclass
class Fragment:
    worker_id: int
    behavior_version: int
    obs: np.ndarray
    continuous: np.ndarray
    discrete: np.ndarray
    rewards: np.ndarray
    behavior_logp: np.ndarray
    dones: np.ndarray
    bootstrap_obs: np.ndarray
    episode_returns: list[float]
    seq: int = -1

    @property
    def steps(self) -> int:
        return len(self.rewards)


class Actor:
    """Owns one environment and rolls fragments across episode boundaries."""

    def __init__(self, worker_id: int, net: FeederNetwork, profile: ExogenousProfile,
                 seed_seq: np.random.SeedSequence, fragment_length: int):
        env_seed, pol_seed = seed_seq.spawn(2)
        self.worker_id = worker_id
        self.env = VVOEnv(net, profile, seed=np.random.default_rng(env_seed).integers(2**63))
        self.rng = np.random.default_rng(pol_seed)
        self.T = fragment_length
        self.obs = self.env.reset()
        self.episode_return = 0.0

    def rollout(self, params: PolicyParameters) -> Fragment:
        T, d = self.T, self.env.obs_dim
        nc = params.n_continuous
        nh = len(params.discrete)
        obs = np.zeros((T, d))
        cont = np.zeros((T, nc))
        disc = np.zeros((T, nh), dtype=int)
        rew = np.zeros(T)
        logp = np.zeros(T)
        dones = np.zeros(T)
        returns = []
        for t in range(T):
            obs[t] = self.obs
            dist, _ = forward(params, self.obs)
            c, k, lp = sample(dist, self.rng)
            cont[t], disc[t], logp[t] = c[0], k[0], lp[0]
            out = self.env.step(ActionVector(c[0], k[0]))
            rew[t] = out.reward
            dones[t] = float(out.done)
            self.episode_return += out.reward
            if out.done:
                returns.append(self.episode_return)
                self.episode_return = 0.0
                self.obs = self.env.reset()
            else:
                self.obs = out.observation
        return Fragment(self.worker_id, params.version, obs, cont, disc, rew, logp, dones,
                        self.obs.copy(), returns)


def observation_normalizer(net: FeederNetwork, load_sigma: float) -> tuple[np.ndarray, np.ndarray]:
    base = np.array([net.kw_to_pu(ld.base_p_kw) for ld in net.loads])
    shift = np.concatenate([np.ones(net.n_buses), base])
    scale = np.concatenate([np.full(net.n_buses, 20.0),
                            1.0 / np.maximum(max(load_sigma, 0.05) * base, 1e-3)])
    return shift, scale


def build_batch(fragments: list[Fragment]) -> TrajectoryBatch:
    return TrajectoryBatch(
        obs=np.stack([f.obs for f in fragments]),
        continuous=np.stack([f.continuous for f in fragments]),
        discrete=np.stack([f.discrete for f in fragments]),
        rewards=np.stack([f.rewards for f in fragments]),
        behavior_logp=np.stack([f.behavior_logp for f in fragments]),
        dones=np.stack([f.dones for f in fragments]),
        bootstrap_obs=np.stack([f.bootstrap_obs for f in fragments]),
    )


class Learner:
    def __init__(self, params: PolicyParameters, cfg: RuntimeConfig):
        self.params = params
        self.cfg = cfg
        self.vcfg = cfg.vtrace()
        self.opt = Adam(params.size, lr=cfg.learning_rate, clip_norm=cfg.grad_clip_norm)
        self.loss_spec = LossSpec(cfg.value_coef, cfg.entropy_coef)
        self.skipped = 0

    def update(self, fragments: list[Fragment]) -> dict:
        batch = build_batch(fragments)
        B, T = batch.shape
        obs = batch.flat("obs")
        cont = batch.flat("continuous")
        disc = batch.flat("discrete")
        info = {}
        for _ in range(self.cfg.num_sgd_iter):
            dist, values = forward(self.params, obs)
            _, boot = forward(self.params, batch.bootstrap_obs)
            log_pi = log_prob(dist, cont, disc).reshape(B, T)
            try:
                vt = compute_vtrace(batch.rewards, values.reshape(B, T), boot, batch.dones,
                                    log_pi, batch.behavior_logp, self.vcfg)
                terms, grad = loss_and_grad(self.params, obs, cont, disc,
                                            vt.pg_advantages.reshape(-1), vt.vs.reshape(-1),
                                            self.loss_spec)
            except FloatingPointError as exc:
                self.skipped += 1
                log.warning("skipping update: %s", exc)
                continue
            self.opt.step(self.params, grad)
            info = {"total_loss": terms.total, "policy_loss": terms.policy_loss,
                    "value_loss": terms.value_loss, "mean_rho": float(vt.rhos.mean())}
        return info


@dataclass
class RunResult:
    params: PolicyParameters
    metrics: list[dict]
    produced_steps: int = 0
    consumed_steps: int = 0
    queued_steps_at_shutdown: int = 0
    consumed_seqs: list[int] = field(default_factory=list)
    stopped_by: str = ""
    error: str | None = None
    elapsed_s: float = 0.0

    @property
    def final_mean_reward(self) -> float:
        rows = [m for m in self.metrics if not math.isnan(m["mean_episode_reward"])]
        return rows[-1]["mean_episode_reward"] if rows else float("nan")


class _Tracker:
    """Shared bookkeeping for the learner side of both execution modes."""

    def __init__(self, cfg: RuntimeConfig, learner: Learner, sync: bool):
        self.cfg = cfg
        self.learner = learner
        self.sync = sync
        self.metrics: list[dict] = []
        self.consumed = 0
        self.seqs: list[int] = []
        self.recent = deque(maxlen=cfg.stop_window)
        self.start = time.perf_counter()

    def consume(self, fragments: list[Fragment], occupancy: int) -> None:
        self.consumed += sum(f.steps for f in fragments)
        self.seqs.extend(f.seq for f in fragments)
        returns = [r for f in fragments for r in f.episode_returns]
        self.recent.extend(returns)
        lag = self.learner.params.version - min(f.behavior_version for f in fragments)
        self.learner.update(fragments)
        elapsed = time.perf_counter() - self.start
        row = {
            "iteration": len(self.metrics) + 1,
            "env_steps": self.consumed,
            "mean_episode_reward": float(np.mean(returns)) if returns else float("nan"),
            "steps_per_sec": None if self.sync else self.consumed / max(elapsed, 1e-9),
            "queue_occupancy": occupancy,
            "version_lag": lag,
            "wall_clock_s": None if self.sync else elapsed,
        }
        self.metrics.append(row)

    def reward_solved(self) -> bool:
        if self.cfg.stop_threshold is None or len(self.recent) < self.cfg.stop_window:
            return False
        return float(np.mean(self.recent)) >= self.cfg.stop_threshold

    def out_of_time(self) -> bool:
        return (self.cfg.max_seconds is not None
                and time.perf_counter() - self.start >= self.cfg.max_seconds)


def _init_params(net: FeederNetwork, cfg: RuntimeConfig) -> PolicyParameters:
    desc = action_space_descriptor(net)
    shift, scale = observation_normalizer(net, cfg.load_sigma)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xA11CE]))
    return PolicyParameters.for_descriptor(desc, rng, cfg.hidden, shift, scale)


def _worker_seeds(cfg: RuntimeConfig, n: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(cfg.seed).spawn(n)


def run_sync(net: FeederNetwork, profile: ExogenousProfile, cfg: RuntimeConfig,
             params: PolicyParameters | None = None) -> RunResult:
    """In-process training; actors are stepped round-robin with current weights."""
    params = params or _init_params(net, cfg)
    learner = Learner(params, cfg)
    tr = _Tracker(cfg, learner, sync=True)
    n = cfg.num_actors
    actors = [Actor(i, net, profile, s, cfg.rollout_fragment_length)
              for i, s in enumerate(_worker_seeds(cfg, n))] if cfg.total_env_steps > 0 else []
    produced = 0
    seq = 0
    stopped_by = "budget"
    turn = 0
    while tr.consumed < cfg.total_env_steps:
        batch = []
        while len(batch) < cfg.fragments_per_batch and produced < cfg.total_env_steps:
            frag = actors[turn % n].rollout(learner.params)
            turn += 1
            frag.seq = seq
            seq += 1
            produced += frag.steps
            batch.append(frag)
        tr.consume(batch, occupancy=0)
        if tr.reward_solved():
            stopped_by = "reward"
            break
        if tr.out_of_time():
            stopped_by = "time"
            break
    return RunResult(learner.params, tr.metrics, produced, tr.consumed, 0, tr.seqs,
                     stopped_by, None, time.perf_counter() - tr.start)


def _actor_main(worker_id, net, profile, seed_seq, cfg, frag_queue, shared, version, lock,
                counters, stop, errors):
    try:
        actor = Actor(worker_id, net, profile, seed_seq, cfg.rollout_fragment_length)
        template = PolicyParameters(*shared["layout"])
        buf = np.frombuffer(shared["array"], dtype=np.float64)
        local = None
        while not stop.is_set():
            if local is None or version.value != local.version:
                with lock:
                    local = template.with_flat(buf.copy(), version.value)
                local.obs_shift, local.obs_scale = shared["shift"], shared["scale"]
            frag = actor.rollout(local)
            pushed = False
            while not pushed and not stop.is_set():
                with counters.get_lock():
                    frag.seq = counters[0]
                    try:
                        frag_queue.put(frag, timeout=0.05)
                    except queue_mod.Full:
                        pass
                    else:
                        counters[0] += 1
                        counters[1] += frag.steps
                        pushed = True
                if not pushed:
                    time.sleep(0.001)
    except Exception:  # surfaced to the learner, which shuts everything down
        errors.put(f"actor {worker_id}: {traceback.format_exc()}")
        stop.set()


def run_async(net: FeederNetwork, profile: ExogenousProfile, cfg: RuntimeConfig,
              params: PolicyParameters | None = None) -> RunResult:
    """Multi-process training: one process per actor, learner in this process."""
    params = params or _init_params(net, cfg)
    learner = Learner(params, cfg)
    tr = _Tracker(cfg, learner, sync=False)
    if cfg.total_env_steps == 0:
        return RunResult(params, [], stopped_by="budget")

    ctx = mp.get_context("spawn")
    manager = ctx.Manager()
    frag_queue = manager.Queue(maxsize=cfg.learner_queue_capacity)
    array = ctx.RawArray("d", params.size)
    buf = np.frombuffer(array, dtype=np.float64)
    buf[:] = params.flat
    version = ctx.Value("q", params.version, lock=False)
    lock = ctx.Lock()
    counters = ctx.Array("q", 2)  # [next sequence number, produced steps]
    stop = ctx.Event()
    errors = ctx.Queue()
    shared = {
        "array": array,
        "layout": (params.obs_dim, params.n_continuous, params.discrete, params.hidden),
        "shift": params.obs_shift,
        "scale": params.obs_scale,
    }

    saved_env = {k: os.environ.get(k) for k in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")}
    for k in saved_env:
        os.environ[k] = "1"
    procs = []
    try:
        for i, s in enumerate(_worker_seeds(cfg, cfg.num_actors)):
            p = ctx.Process(target=_actor_main, daemon=True,
                            args=(i, net, profile, s, cfg, frag_queue, shared, version, lock,
                                  counters, stop, errors))
            p.start()
            procs.append(p)
    finally:
        for k, v in saved_env.items():
            if v is None:
                os.environ.pop(k, None)
            else:
                os.environ[k] = v

    tr.start = time.perf_counter()
    stopped_by = "budget"
    error = None
    try:
        pending: list[Fragment] = []
        while tr.consumed < cfg.total_env_steps:
            try:
                err = errors.get_nowait()
            except queue_mod.Empty:
                err = None
            if err is not None:
                error = err
                stopped_by = "error"
                break
            if tr.out_of_time():
                stopped_by = "time"
                break
            try:
                frag = frag_queue.get(timeout=0.05)
            except queue_mod.Empty:
                continue
            pending.append(frag)
            remaining = cfg.total_env_steps - tr.consumed - sum(f.steps for f in pending)
            if len(pending) >= cfg.fragments_per_batch or remaining <= 0:
                occupancy = frag_queue.qsize()
                tr.consume(pending, occupancy)
                pending = []
                with lock:
                    buf[:] = learner.params.flat
                    version.value = learner.params.version
                if tr.reward_solved():
                    stopped_by = "reward"
                    break
        # fragments pulled but not yet trained on still count as consumed
        if pending:
            tr.consumed += sum(f.steps for f in pending)
            tr.seqs.extend(f.seq for f in pending)
    finally:
        stop.set()
        queued = 0
        deadline = time.perf_counter() + 30.0
        while any(p.is_alive() for p in procs) and time.perf_counter() < deadline:
            queued += _drain(frag_queue)
            for p in procs:
                p.join(timeout=0.02)
        for p in procs:
            if p.is_alive():
                p.terminate()
        queued += _drain(frag_queue)
        produced = int(counters[1])
        try:
            while error is None:
                error = errors.get_nowait()
        except queue_mod.Empty:
            pass
        manager.shutdown()

    if error is not None and stopped_by != "error":
        stopped_by = "error"
    return RunResult(learner.params, tr.metrics, produced, tr.consumed, queued, tr.seqs,
                     stopped_by, error, time.perf_counter() - tr.start)


def _drain(q) -> int:
    steps = 0
    while True:
        try:
            steps += q.get_nowait().steps
        except queue_mod.Empty:
            return steps
        except (EOFError, OSError):
            return steps


def write_metrics(path: str | Path, metrics: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for m in metrics:
            w.writerow(["" if m[c] is None else (repr(float(m[c])) if isinstance(m[c], float) else m[c])
                        for c in METRICS_COLUMNS])


def train(net: FeederNetwork, cfg: RuntimeConfig, out_dir: str | Path,
          profile: ExogenousProfile | None = None) -> RunResult:
    """Run training and write ``checkpoint.npz`` and ``metrics.csv`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    profile = profile or ExogenousProfile.synthetic(cfg.seed, cfg.load_sigma)
    cfg.num_actors = effective_actors(cfg.num_actors)
    runner = run_sync if cfg.sync else run_async
    result = runner(net, profile, cfg)
    write_metrics(out / "metrics.csv", result.metrics)
    save_checkpoint(out / "checkpoint.npz", result.params,
                    descriptor_hash(action_space_descriptor(net), net.bus_ids))
    return result
