"""Per-unit model of a radial distribution feeder and its controllable devices.

Scenario files are JSON with top-level keys ``buses``, ``lines``,
``transformers``, ``capacitors``, ``pvs``, ``batteries``, ``loads`` and
``mva_base``. Impedances are per-unit on ``mva_base``; device ratings are in
kW / kvar.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Any

TAP_MIN_PU = 0.9
TAP_MAX_PU = 1.1
TAP_STEPS = 32
TAP_NEUTRAL = 16

V_MIN_PU = 0.95
V_MAX_PU = 1.05


class ScenarioError(ValueError):
    """Raised when a scenario file cannot be parsed or violates an invariant."""


@dataclass(frozen=True)
class Bus:
    id: str
    base_kv: float
    bus_type: str = "load"  # "slack" | "load"
    phases: int = 1
    v_set_pu: float = 1.0  # voltage magnitude held at the slack bus


@dataclass(frozen=True)
class Line:
    from_bus: str
    to_bus: str
    resistance_pu: float
    reactance_pu: float
    shunt_susceptance_pu: float = 0.0


@dataclass(frozen=True)
class Transformer:
    """Series impedance with an off-nominal tap on the from side.

    The tap ratio is the voltage gain from the from-bus to the to-bus, so a
    higher tap index raises downstream voltage.
    """

    from_bus: str
    to_bus: str
    resistance_pu: float
    reactance_pu: float
    tap_min_pu: float = TAP_MIN_PU
    tap_max_pu: float = TAP_MAX_PU
    num_steps: int = TAP_STEPS + 1


@dataclass(frozen=True)
class Capacitor:
    bus: str
    rated_kvar: float
    status: int = 0


@dataclass(frozen=True)
class PvSystem:
    bus: str
    pmpp_kw: float
    p_min_kw: float
    p_max_kw: float
    q_min_kvar: float
    q_max_kvar: float


@dataclass(frozen=True)
class Battery:
    bus: str
    p_min_kw: float
    p_max_kw: float


@dataclass(frozen=True)
class Load:
    bus: str
    base_p_kw: float
    base_q_kvar: float


@dataclass(frozen=True)
class FeederNetwork:
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    transformers: tuple[Transformer, ...] = ()
    capacitors: tuple[Capacitor, ...] = ()
    pvs: tuple[PvSystem, ...] = ()
    batteries: tuple[Battery, ...] = ()
    loads: tuple[Load, ...] = ()
    system_mva_base: float = 1.0
    name: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        validate(self)

    @property
    def bus_ids(self) -> list[str]:
        return [b.id for b in self.buses]

    @cached_property
    def bus_index(self) -> dict[str, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @cached_property
    def slack_index(self) -> int:
        return next(i for i, b in enumerate(self.buses) if b.bus_type == "slack")

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    def kw_to_pu(self, kw: float) -> float:
        return kw / (1000.0 * self.system_mva_base)

    def with_devices(self, **changes: Any) -> "FeederNetwork":
        """Return a copy with some device tuples replaced (validated again)."""
        changes = {k: tuple(v) for k, v in changes.items()}
        return replace(self, **changes)


def tap_ratio(transformer: Transformer, index: int) -> float:
    """Per-unit ratio of tap position ``index`` (0 maps to tap_min_pu)."""
    steps = transformer.num_steps - 1
    if not 0 <= index <= steps or int(index) != index:
        raise ValueError(f"tap index {index} out of range 0..{steps}")
    # written so that both endpoints are hit exactly
    frac = index / steps
    return transformer.tap_min_pu * (1.0 - frac) + transformer.tap_max_pu * frac


def validate(net: FeederNetwork) -> None:
    ids = [b.id for b in net.buses]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise ScenarioError(f"bus ids must be unique (ids unique violated by {dup})")
    n_slack = sum(b.bus_type == "slack" for b in net.buses)
    if n_slack != 1:
        raise ScenarioError(f"network must have exactly one slack bus, found {n_slack}")
    for b in net.buses:
        if b.bus_type not in ("slack", "load"):
            raise ScenarioError(f"bus {b.id}: unknown bus_type {b.bus_type!r}")
    for b in net.buses:
        if b.v_set_pu <= 0:
            raise ScenarioError(f"bus {b.id}: v_set_pu must be positive")
    if net.system_mva_base <= 0:
        raise ScenarioError("mva_base must be positive")

    known = set(ids)
    edges = []
    for ln in net.lines:
        if ln.resistance_pu < 0:
            raise ScenarioError(f"line {ln.from_bus}-{ln.to_bus}: negative resistance")
        if ln.resistance_pu == 0 and ln.reactance_pu == 0:
            raise ScenarioError(f"line {ln.from_bus}-{ln.to_bus}: zero impedance")
        edges.append((ln.from_bus, ln.to_bus))
    for tr in net.transformers:
        if tr.resistance_pu < 0 or (tr.resistance_pu == 0 and tr.reactance_pu == 0):
            raise ScenarioError(f"transformer {tr.from_bus}-{tr.to_bus}: bad impedance")
        if not tr.tap_min_pu < tr.tap_max_pu or tr.num_steps < 2:
            raise ScenarioError(f"transformer {tr.from_bus}-{tr.to_bus}: bad tap range")
        edges.append((tr.from_bus, tr.to_bus))
    for a, b in edges:
        for end in (a, b):
            if end not in known:
                raise ScenarioError(f"branch {a}-{b} references unknown bus {end!r}")

    for kind, devices in (
        ("capacitor", net.capacitors),
        ("pv", net.pvs),
        ("battery", net.batteries),
        ("load", net.loads),
    ):
        for d in devices:
            if d.bus not in known:
                raise ScenarioError(f"{kind} references unknown bus {d.bus!r}")
    for c in net.capacitors:
        if c.status not in (0, 1):
            raise ScenarioError(f"capacitor at {c.bus}: status must be 0 or 1")
    for pv in net.pvs:
        if pv.p_min_kw > pv.p_max_kw or pv.q_min_kvar > pv.q_max_kvar:
            raise ScenarioError(f"pv at {pv.bus}: min bound exceeds max bound")
    for bt in net.batteries:
        if not bt.p_min_kw <= 0.0 <= bt.p_max_kw:
            raise ScenarioError(f"battery at {bt.bus}: bounds must satisfy p_min <= 0 <= p_max")
    for ld in net.loads:
        if ld.base_p_kw < 0:
            raise ScenarioError(f"load at {ld.bus}: negative active demand")

    if len(edges) != len(ids) - 1:
        raise ScenarioError(
            f"network not radial: {len(edges)} branches for {len(ids)} buses"
        )
    adj: dict[str, list[str]] = {i: [] for i in ids}
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    slack = next(b.id for b in net.buses if b.bus_type == "slack")
    seen = {slack}
    todo = deque([slack])
    while todo:
        for nb in adj[todo.popleft()]:
            if nb not in seen:
                seen.add(nb)
                todo.append(nb)
    if len(seen) != len(ids):
        raise ScenarioError(
            f"network not radial: buses unreachable from slack {sorted(set(ids) - seen)}"
        )


_SECTIONS = {
    "buses": Bus,
    "lines": Line,
    "transformers": Transformer,
    "capacitors": Capacitor,
    "pvs": PvSystem,
    "batteries": Battery,
    "loads": Load,
}


def network_from_dict(data: dict, name: str = "") -> FeederNetwork:
    if not isinstance(data, dict):
        raise ScenarioError("scenario must be a JSON object")
    missing = {"buses", "lines", "mva_base"} - set(data)
    if missing:
        raise ScenarioError(f"scenario missing keys: {sorted(missing)}")
    kwargs: dict[str, Any] = {}
    for key, cls in _SECTIONS.items():
        items = data.get(key, [])
        try:
            kwargs[key] = tuple(cls(**item) for item in items)
        except TypeError as exc:
            raise ScenarioError(f"malformed entry in {key!r}: {exc}") from None
    try:
        mva = float(data["mva_base"])
    except (TypeError, ValueError):
        raise ScenarioError("mva_base must be a number") from None
    return FeederNetwork(system_mva_base=mva, name=name or str(data.get("name", "")), **kwargs)


def network_to_dict(net: FeederNetwork) -> dict:
    out: dict[str, Any] = {"name": net.name, "mva_base": net.system_mva_base}
    for key in _SECTIONS:
        out[key] = [asdict(x) for x in getattr(net, key)]
    return out


def load_network(path: str | Path) -> FeederNetwork:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ScenarioError(f"scenario file not found: {path}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"cannot parse {path}: {exc}") from None
    return network_from_dict(data, name=data.get("name", path.stem) if isinstance(data, dict) else "")


def save_network(net: FeederNetwork, path: str | Path) -> None:
    Path(path).write_text(json.dumps(network_to_dict(net), indent=2))


def bundled_path(name: str) -> Path:
    """Path of a scenario shipped with the package (``feeder13.json``, ``toy132.json``)."""
    return Path(str(resources.files("voltvar") / "data" / name))


def load_bundled(name: str = "feeder13.json") -> FeederNetwork:
    return load_network(bundled_path(name))
