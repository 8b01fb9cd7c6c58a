"""PNG figures written next to the CSV outputs of the command-line tools.

Uses the object-oriented Figure API with the Agg canvas, so nothing touches
pyplot's global state or needs a display.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

V_BAND = (0.95, 1.05)


def _save(fig: Figure, path: str | Path) -> Path:
    path = Path(path)
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    return path


def plot_ranking(buses: Sequence[str], v_total: Sequence[float], l_total: Sequence[float],
                 path: str | Path) -> Path:
    """Stacked bars of the two fitness addends per candidate bus, best first."""
    fig = Figure(figsize=(max(5.0, 0.45 * len(buses) + 2), 3.6))
    ax = fig.add_subplot()
    x = np.arange(len(buses))
    ax.bar(x, v_total, color="tab:red", label="violations (bus-hours)")
    ax.bar(x, l_total, bottom=v_total, color="tab:blue", label="losses (pu-hours)")
    ax.set_xticks(x, buses, rotation=45, ha="right")
    ax.set_ylabel("fitness")
    ax.set_title("PV + battery placement ranking")
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)


def plot_learning_curve(metrics: list[dict], path: str | Path) -> Path:
    fig = Figure(figsize=(6, 3.6))
    ax = fig.add_subplot()
    steps = [m["env_steps"] for m in metrics]
    rew = [m["mean_episode_reward"] for m in metrics]
    ax.plot(steps, rew, lw=1.5)
    ax.axhline(0.0, color="0.6", lw=0.8, ls="--")
    ax.set_xlabel("environment steps")
    ax.set_ylabel("mean episode reward")
    ax.set_title("Training curve")
    return _save(fig, path)


def plot_day_traces(hours: Sequence[int], series: dict[str, dict[str, Sequence[float]]],
                    violations: Sequence[int], path: str | Path) -> Path:
    """One panel per device class (columns are devices) plus the violation count."""
    panels = [(k, v) for k, v in series.items() if v] + [("violations", {"count": violations})]
    fig = Figure(figsize=(7, 1.9 * len(panels)))
    axes = fig.subplots(len(panels), 1, sharex=True, squeeze=False)[:, 0]
    for ax, (title, cols) in zip(axes, panels):
        for name, ys in cols.items():
            ax.step(hours, ys, where="mid", lw=1.2, label=name)
        ax.set_ylabel(title, fontsize=8)
        if len(cols) > 1:
            ax.legend(frameon=False, fontsize=6, ncol=min(4, len(cols)))
    axes[-1].set_xlabel("hour")
    return _save(fig, path)


def plot_search_trace(trace: Sequence[float], path: str | Path, label: str = "") -> Path:
    fig = Figure(figsize=(6, 3.4))
    ax = fig.add_subplot()
    ax.plot(np.arange(len(trace)), trace, drawstyle="steps-post", lw=1.5)
    ax.set_xlabel("iteration" if label == "pso" else "evaluation")
    ax.set_ylabel("best reward so far")
    ax.set_title(f"Search trace ({label})" if label else "Search trace")
    return _save(fig, path)


def plot_voltage_profile(bus_ids: Sequence[str], vm: Sequence[float], path: str | Path) -> Path:
    fig = Figure(figsize=(max(5.0, 0.4 * len(bus_ids) + 2), 3.4))
    ax = fig.add_subplot()
    x = np.arange(len(bus_ids))
    ax.plot(x, vm, "o-", lw=1.2)
    for lim in V_BAND:
        ax.axhline(lim, color="tab:red", lw=0.8, ls="--")
    lo = min(min(vm), V_BAND[0]) - 0.01
    hi = max(max(vm), V_BAND[1]) + 0.01
    ax.set_ylim(math.floor(lo * 100) / 100, math.ceil(hi * 100) / 100)
    ax.set_xticks(x, bus_ids, rotation=45, ha="right")
    ax.set_ylabel("|V| (pu)")
    ax.set_title("Bus voltage profile")
    return _save(fig, path)
