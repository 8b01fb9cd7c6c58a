"""``vvo`` command line: place, train, eval, baseline and pf subcommands.

Every subcommand writes ``manifest.json`` into its output directory before
doing any work and completes it (end time, status, outputs) afterwards.
Exit codes: 0 success, 1 internal error, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
import traceback
from dataclasses import fields
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .baselines import PsoConfig, brute_force_solve, pso_solve
from .env import ActionVector, ExogenousProfile, VVOEnv, action_space_descriptor, neutral_action
from .grid import ScenarioError, bundled_path, load_network, network_to_dict
from .placement import check_hours, rank_placements
from .policy import CheckpointMismatch, descriptor_hash, forward, load_checkpoint, mode
from .powerflow import PowerFlowDiverged, count_violations
from .runtime import RuntimeConfig, train

log = logging.getLogger("vvo")


class UsageError(Exception):
    """Bad input from the user; reported with exit code 2."""


# --- helpers -----------------------------------------------------------------

def resolve_scenario(name: str) -> Path:
    """A path on disk, or the name of a scenario bundled with the package."""
    p = Path(name)
    if p.exists():
        return p
    if p.parent == Path("."):
        b = bundled_path(p.name)
        if b.exists():
            return b
    raise UsageError(f"scenario file not found: {name}")


def scenario_hash(net) -> str:
    blob = json.dumps(network_to_dict(net), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def load_profile(args, seed: int, load_sigma: float = 0.1) -> ExogenousProfile:
    if getattr(args, "irradiance_csv", None):
        for p in (args.irradiance_csv, args.load_csv):
            if p and not Path(p).exists():
                raise UsageError(f"profile file not found: {p}")
        return ExogenousProfile.from_csv(args.irradiance_csv, args.load_csv, load_sigma)
    return ExogenousProfile.synthetic(seed, load_sigma)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path: str | None, overrides: list[str]) -> dict:
    cfg: dict = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise UsageError(f"config file not found: {path}")
        try:
            if p.suffix.lower() == ".toml":
                cfg = tomllib.loads(p.read_text())
            else:
                cfg = json.loads(p.read_text())
        except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
            raise UsageError(f"cannot parse config {path}: {exc}") from None
        cfg = cfg.get("runtime", cfg)
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"override must look like key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg[k.strip()] = _parse_value(v.strip())
    return cfg


def runtime_config(cfg: dict) -> RuntimeConfig:
    known = {f.name for f in fields(RuntimeConfig)}
    unknown = sorted(set(cfg) - known)
    if unknown:
        raise UsageError(f"unknown config keys: {unknown}")
    try:
        return RuntimeConfig(**cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid runtime config: {exc}") from None


def write_csv(path: Path, header: list[str], rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, np.integer):
        return int(x)
    return x


class Manifest:
    """Run record written before work starts and finalized once at the end."""

    def __init__(self, out: Path, subcommand: str, config: dict, scen_hash: str | None, seed):
        self.path = out / "manifest.json"
        self.data = {
            "subcommand": subcommand,
            "version": __version__,
            "config": config,
            "scenario_hash": scen_hash,
            "seed": seed,
            "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "finished_at": None,
            "status": "running",
            "outputs": [],
        }
        self._write()

    def _write(self):
        self.path.write_text(json.dumps(self.data, indent=2, default=str) + "\n")

    def finish(self, outputs, status: str = "ok", **extra):
        self.data.update(extra)
        self.data["outputs"] = [str(p) for p in outputs]
        self.data["status"] = status
        self.data["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        self._write()


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _hours(args, profile: ExogenousProfile) -> list[int]:
    if args.hours <= 0:
        raise UsageError("empty horizon: --hours must be positive")
    hours = list(range(args.start, args.start + args.hours * args.stride, args.stride))
    try:
        return list(check_hours(hours, profile))
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# --- subcommands -------------------------------------------------------------

def cmd_place(args) -> int:
    net = load_network(resolve_scenario(args.scenario))
    profile = load_profile(args, args.seed)
    hours = _hours(args, profile)
    out = _out_dir(args)
    config = {k: v for k, v in vars(args).items() if k != "func"}
    man = Manifest(out, "place", config, scenario_hash(net), args.seed)
    ranking = rank_placements(net, None, profile, hours, args.top_k, args.rating_kw,
                              args.mode, args.keep_existing, args.workers)
    rows = [(i + 1, c.pv_bus, c.v_total, _fmt(c.l_total), _fmt(c.fitness))
            for i, c in enumerate(ranking.candidates)]
    outputs = [write_csv(out / "ranking.csv", ["rank", "bus", "v_total", "l_total", "fitness"], rows)]
    if not args.no_plots:
        from .plotting import plot_ranking
        c = ranking.candidates
        outputs.append(plot_ranking([x.pv_bus for x in c], [x.v_total for x in c],
                                    [x.l_total for x in c], out / "ranking.png"))
    man.finish(outputs, hours_evaluated=len(hours))
    print(f"ranked {len(ranking)} candidates over {len(hours)} hours -> {outputs[0]}")
    return 0


def cmd_train(args) -> int:
    net = load_network(resolve_scenario(args.scenario))
    cfg_dict = load_config(args.config, args.set)
    for key, val in (("num_actors", args.actors), ("total_env_steps", args.steps),
                     ("seed", args.seed), ("max_seconds", args.max_seconds)):
        if val is not None:
            cfg_dict[key] = val
    if args.sync:
        cfg_dict["sync"] = True
    cfg = runtime_config(cfg_dict)
    profile = load_profile(args, cfg.seed, cfg.load_sigma)
    out = _out_dir(args)
    man = Manifest(out, "train", cfg.to_dict(), scenario_hash(net), cfg.seed)
    result = train(net, cfg, out, profile)
    outputs = [out / "metrics.csv", out / "checkpoint.npz"]
    if not args.no_plots and result.metrics:
        from .plotting import plot_learning_curve
        outputs.append(plot_learning_curve(result.metrics, out / "learning_curve.png"))
    status = "error" if result.error else "ok"
    man.finish(outputs, status, stopped_by=result.stopped_by, env_steps=result.consumed_steps,
               final_mean_reward=result.final_mean_reward, effective_actors=cfg.num_actors,
               error=result.error)
    print(f"trained {result.consumed_steps} steps ({result.stopped_by}); "
          f"final mean reward {result.final_mean_reward:.4f}")
    if result.error:
        print(result.error, file=sys.stderr)
        return 1
    return 0


def cmd_eval(args) -> int:
    net = load_network(resolve_scenario(args.scenario))
    ck = Path(args.checkpoint)
    if not ck.exists():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    desc = action_space_descriptor(net)
    params, meta = load_checkpoint(ck, descriptor_hash(desc, net.bus_ids))
    profile = load_profile(args, args.seed)
    out = _out_dir(args)
    config = {k: v for k, v in vars(args).items() if k != "func"}
    man = Manifest(out, "eval", config, scenario_hash(net), args.seed)

    start = 24 * args.day
    hours = list(range(start, start + 24))
    try:
        check_hours(hours, profile)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    env = VVOEnv(net, profile, seed=args.seed)
    pv_names = [f"pv_{pv.bus}" for pv in net.pvs]
    bt_names = [f"battery_{b.bus}" for b in net.batteries]
    cap_names = [f"cap_{c.bus}" for c in net.capacitors]
    tap_names = [f"tap_{t.from_bus}_{t.to_bus}" for t in net.transformers]
    rows = {k: [] for k in ("pv_kw", "pv_kvar", "battery_kw", "capacitors", "taps", "violations")}
    long_rows = []
    for h in hours:
        obs = env.reset(hour=h)
        dist, _ = forward(params, obs)
        cont, disc = mode(dist)
        res = env.step(ActionVector(cont[0], disc[0]))
        st = res.info["state"]
        rows["pv_kw"].append([h] + [_fmt(x) for x in st.pv_p_kw])
        rows["pv_kvar"].append([h] + [_fmt(x) for x in st.pv_q_kvar])
        rows["battery_kw"].append([h] + [_fmt(x) for x in st.batt_p_kw])
        rows["capacitors"].append([h] + [int(x) for x in st.cap_status])
        rows["taps"].append([h] + [int(x) for x in st.tap_indices])
        rows["violations"].append([h, res.info["violation_count"], _fmt(res.reward),
                                   _fmt(res.info["losses_pu"]), int(res.info["converged"])])
        for names, vals in ((pv_names, st.pv_p_kw), ([n + "_kvar" for n in pv_names], st.pv_q_kvar),
                            (bt_names, st.batt_p_kw), (cap_names, st.cap_status),
                            (tap_names, st.tap_indices)):
            long_rows.extend([h, n, _fmt(v)] for n, v in zip(names, vals))

    outputs = [
        write_csv(out / "trace_pv_kw.csv", ["hour"] + pv_names, rows["pv_kw"]),
        write_csv(out / "trace_pv_kvar.csv", ["hour"] + pv_names, rows["pv_kvar"]),
        write_csv(out / "trace_battery_kw.csv", ["hour"] + bt_names, rows["battery_kw"]),
        write_csv(out / "trace_capacitors.csv", ["hour"] + cap_names, rows["capacitors"]),
        write_csv(out / "trace_taps.csv", ["hour"] + tap_names, rows["taps"]),
        write_csv(out / "trace_violations.csv",
                  ["hour", "violations", "reward", "losses_pu", "converged"], rows["violations"]),
        write_csv(out / "setpoints.csv", ["hour", "device", "setpoint"], long_rows),
    ]
    total = sum(r[1] for r in rows["violations"])
    if not args.no_plots:
        from .plotting import plot_day_traces

        def cols(names, key):
            return {n: [float(r[i + 1]) for r in rows[key]] for i, n in enumerate(names)}

        series = {"PV kW": cols(pv_names, "pv_kw"), "PV kvar": cols(pv_names, "pv_kvar"),
                  "battery kW": cols(bt_names, "battery_kw"), "capacitor": cols(cap_names, "capacitors"),
                  "tap index": cols(tap_names, "taps")}
        outputs.append(plot_day_traces(hours, series, [r[1] for r in rows["violations"]],
                                       out / "day_traces.png"))
    man.finish(outputs, total_violations=total, checkpoint_version=meta["version"])
    print(f"evaluated hours {hours[0]}..{hours[-1]}: {total} bus-hour violations")
    return 0


def cmd_baseline(args) -> int:
    net = load_network(resolve_scenario(args.scenario))
    profile = load_profile(args, args.seed)
    if not 0 <= args.hour < profile.hours:
        raise UsageError(f"hour {args.hour} outside 0..{profile.hours - 1}")
    out = _out_dir(args)
    config = {k: v for k, v in vars(args).items() if k != "func"}
    man = Manifest(out, "baseline", config, scenario_hash(net), args.seed)
    env = VVOEnv(net, profile, seed=args.seed)
    env.reset(hour=args.hour)
    if args.method == "pso":
        res = pso_solve(env, PsoConfig(args.particles, args.iters, seed=args.seed,
                                       include_neutral=not args.no_neutral_particle))
    elif args.method == "random":
        if args.budget is None or args.budget < 1:
            raise UsageError("--budget >= 1 is required for random search")
        res = brute_force_solve(env, args.budget, args.seed)
    else:
        res = brute_force_solve(env, args.budget, exhaustive=True)
    step_col = "iteration" if res.method == "pso" else "evaluation"
    outputs = [
        write_csv(out / "search_trace.csv", [step_col, "best_reward"],
                  [(i, _fmt(r)) for i, r in enumerate(res.trace)]),
        write_csv(out / "best_action.csv", ["index", "kind", "value"],
                  [(i, "continuous", _fmt(v)) for i, v in enumerate(res.best_action.continuous)]
                  + [(i, "discrete", int(v)) for i, v in enumerate(res.best_action.discrete)]),
    ]
    if not args.no_plots:
        from .plotting import plot_search_trace
        outputs.append(plot_search_trace(res.trace, out / "search_trace.png", res.method))
    man.finish(outputs, best_reward=res.best_reward, evaluations=res.evaluations, method=res.method)
    print(f"{res.method}: best reward {res.best_reward:.4f} after {res.evaluations} evaluations")
    return 0


def cmd_pf(args) -> int:
    net = load_network(resolve_scenario(args.scenario))
    profile = load_profile(args, args.seed)
    out = _out_dir(args)
    config = {k: v for k, v in vars(args).items() if k != "func"}
    man = Manifest(out, "pf", config, scenario_hash(net), args.seed)
    env = VVOEnv(net, profile, seed=args.seed)
    try:
        env.reset(hour=args.hour)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    state = env.decode(neutral_action(net, env.irradiance))
    try:
        sol = env.solver.solve(state)
    except PowerFlowDiverged as exc:
        man.finish([], "diverged")
        print(f"power flow diverged: {exc}", file=sys.stderr)
        return 1
    rows = [(b, _fmt(v), _fmt(a)) for b, v, a in zip(sol.bus_ids, sol.vm, sol.va)]
    outputs = [write_csv(out / "pf.csv", ["bus", "V_pu", "theta_rad"], rows)]
    if not args.no_plots:
        from .plotting import plot_voltage_profile
        outputs.append(plot_voltage_profile(sol.bus_ids, sol.vm, out / "voltage_profile.png"))
    n, _ = count_violations(sol)
    man.finish(outputs, iterations=sol.iterations, losses_pu=sol.losses_pu, violations=n)
    print(f"converged in {sol.iterations} iterations; losses {sol.losses_pu:.6f} pu; {n} violations")
    return 0


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vvo", description="Volt-VAR control toolkit")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default):
        sp.add_argument("--scenario", default="feeder13.json",
                        help="scenario JSON path or bundled name (default feeder13.json)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default=out_default, help="output directory")
        sp.add_argument("--irradiance-csv", help="hourly irradiance profile (hour,irradiance)")
        sp.add_argument("--load-csv", help="hourly load seed profile (hour,load_factor_seed)")
        sp.add_argument("--no-plots", action="store_true", help="write CSVs only")

    sp = sub.add_parser("place", help="rank PV + battery placements")
    common(sp, "out/place")
    sp.add_argument("--hours", type=int, default=8760, help="number of hours to evaluate")
    sp.add_argument("--start", type=int, default=0)
    sp.add_argument("--stride", type=int, default=1, help="evaluate every n-th hour")
    sp.add_argument("--top-k", type=int, default=None)
    sp.add_argument("--rating-kw", type=float, default=100.0)
    sp.add_argument("--mode", choices=["independent", "sequential"], default="independent")
    sp.add_argument("--keep-existing", action="store_true", help="keep scenario PVs/batteries")
    sp.add_argument("--workers", type=int, default=None)
    sp.set_defaults(func=cmd_place)

    sp = sub.add_parser("train", help="train the actor-learner agent")
    common(sp, "out/train")
    sp.add_argument("--actors", type=int, default=None)
    sp.add_argument("--steps", type=int, default=None, help="environment step budget")
    sp.add_argument("--sync", action="store_true", help="deterministic in-process mode")
    sp.add_argument("--max-seconds", type=float, default=None)
    sp.add_argument("--config", help="JSON or TOML file with runtime settings")
    sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override one runtime setting (repeatable)")
    sp.set_defaults(func=cmd_train)
    # the seed default is owned by the runtime config for train
    sp.set_defaults(seed=None)

    sp = sub.add_parser("eval", help="roll the deterministic policy over one day")
    common(sp, "out/eval")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--day", type=int, default=0, help="day of year (0-based)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("baseline", help="PSO or brute-force search at one hour")
    common(sp, "out/baseline")
    sp.add_argument("--method", choices=["pso", "random", "exhaustive"], default="pso")
    sp.add_argument("--hour", type=int, default=12)
    sp.add_argument("--particles", type=int, default=100)
    sp.add_argument("--iters", type=int, default=50)
    sp.add_argument("--budget", type=int, default=None)
    sp.add_argument("--no-neutral-particle", action="store_true")
    sp.set_defaults(func=cmd_baseline)

    sp = sub.add_parser("pf", help="one power flow with neutral controls, dumped to CSV")
    common(sp, "out/pf")
    sp.add_argument("--hour", type=int, default=12)
    sp.set_defaults(func=cmd_pf)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ScenarioError, CheckpointMismatch) as exc:
        print(f"vvo {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"vvo {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        print(f"vvo {args.command}: internal error", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
