"""Run configuration files.

A run is described by one TOML file with sections ``[grid]``,
``[controller]``, ``[scenario]`` and optional ``[objective]``,
``[analysis]`` and ``[output]``. Bus numbers in files are 1-based. The full
grammar is documented in ``docs/config-format.md``.
"""
from __future__ import annotations

import copy
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import numpy as np
import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .controllers import ControllerSpec, Variant
from .grid import CommGraph, GridTopology, TopologyError, validate_topology
from .sim import SimScenario

SECTIONS = ("grid", "controller", "objective", "scenario", "analysis", "output")

OUTPUT_DEFAULTS = {
    "directory": "out",
    "trajectory": True,
    "metrics": True,
    "stability": True,
    "figures": True,
    "stride": 1000,
}
ANALYSIS_DEFAULTS = {"rtol": 1e-9}
CONTROLLER_KEYS = {
    "vdm": {"variant", "K_P"},
    "avg1": {"variant", "K_P", "K_V", "voltage_bus", "gamma", "comm"},
    "avg2": {"variant", "K_P", "K_V", "gamma", "comm", "integral_comm", "delay_voltage_sum"},
    "avg3": {"variant", "K_P", "K_V", "gamma", "delta", "comm"},
}
REQUIRED = {
    "vdm": ("K_P",),
    "avg1": ("K_P", "K_V", "gamma", "comm"),
    "avg2": ("K_P", "K_V", "gamma", "comm"),
    "avg3": ("K_P", "K_V", "gamma", "delta", "comm"),
}


class ConfigError(ValueError):
    """Invalid configuration; ``issues`` holds one message per problem."""

    def __init__(self, issues):
        self.issues = [issues] if isinstance(issues, str) else list(issues)
        super().__init__("\n".join(self.issues))


def _per_bus(value, n: int, what: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.size == 1:
        return np.full(n, float(arr[0]))
    if arr.shape != (n,):
        raise ConfigError(f"{what}: expected a scalar or {n} values, got {arr.size}")
    return arr


def _edge_list(entries, n: int, weight_key: str, where: str) -> tuple[list, list[str]]:
    """Parse ``[{from, to, <weight_key>}]`` into 0-based triples."""
    edges, issues = [], []
    if not isinstance(entries, list):
        return edges, [f"{where}: expected a list of tables"]
    for k, e in enumerate(entries):
        tag = f"{where}[{k + 1}]"
        if not isinstance(e, dict):
            issues.append(f"{tag}: expected a table with from, to, {weight_key}")
            continue
        i, j = e.get("from"), e.get("to")
        if isinstance(i, int) and isinstance(j, int):
            tag += f" ({i}-{j})"
        else:
            issues.append(f"{tag}: 'from' and 'to' must be integer bus numbers")
            continue
        if not (1 <= i <= n and 1 <= j <= n):
            issues.append(f"{tag}: bus number out of range 1..{n}")
            continue
        if weight_key not in e:
            name = "resistance" if weight_key == "R" else "weight"
            issues.append(f"{tag}: missing {name} '{weight_key}'")
            continue
        w = e[weight_key]
        if isinstance(w, bool) or not isinstance(w, (int, float)):
            issues.append(f"{tag}: '{weight_key}' must be a number")
            continue
        edges.append((i - 1, j - 1, float(w)))
    return edges, issues


@dataclass(eq=False)
class RunConfig:
    """Parsed and validated run description.

    ``data`` is the normalized document (defaults filled in). Builders turn
    it into model objects; ``dumps`` writes it back out.
    """

    data: dict
    source: Optional[Path] = None

    def __post_init__(self):
        self.data = _normalize(self.data)
        # building every object once surfaces all validation errors at load time
        self.grid()
        self.controller()
        self.scenario()

    def __eq__(self, other) -> bool:
        return isinstance(other, RunConfig) and self.data == other.data

    @property
    def n(self) -> int:
        return int(self.data["grid"]["n_buses"])

    @property
    def variant(self) -> Variant:
        return Variant(self.data["controller"]["variant"])

    @property
    def output(self) -> dict:
        return self.data["output"]

    @property
    def rtol(self) -> float:
        return float(self.data["analysis"]["rtol"])

    def grid(self) -> GridTopology:
        g = self.data["grid"]
        n = self.n
        lines, issues = _edge_list(g.get("lines", []), n, "R", "grid.lines")
        if issues:
            raise ConfigError(issues)
        grid = GridTopology(_per_bus(g["capacitance"], n, "grid.capacitance"), _per_bus(g["v_nom"], n, "grid.v_nom"), lines)
        res = validate_topology(grid)
        if not res.ok:
            raise ConfigError([f"grid: {m}" for m in res.issues])
        return grid

    def _comm(self, value, where: str, grid: GridTopology) -> CommGraph:
        n = self.n
        if value == "mirror-grid":
            return CommGraph.mirror(grid)
        if value == "complete":
            return CommGraph.complete(n)
        if isinstance(value, str):
            raise ConfigError(f"{where}: unknown shorthand {value!r} (use 'mirror-grid', 'complete' or a list of edges)")
        edges, issues = _edge_list(value, n, "c", where)
        if issues:
            raise ConfigError(issues)
        try:
            return CommGraph(n, edges)
        except TopologyError as exc:
            raise ConfigError([f"{where}: {m}" for m in exc.issues]) from None

    def controller(self) -> ControllerSpec:
        c, n = self.data["controller"], self.n
        grid = self.grid()
        v = self.variant
        K_P = _per_bus(c["K_P"], n, "controller.K_P")
        try:
            if v is Variant.VDM:
                return ControllerSpec.vdm(K_P)
            comm = self._comm(c["comm"], "controller.comm", grid)
            if v is Variant.AVG_I:
                bus = c.get("voltage_bus", 1)
                if not isinstance(bus, int) or not 1 <= bus <= n:
                    raise ConfigError(f"controller.voltage_bus: must be a bus number in 1..{n}")
                return ControllerSpec.avg1(K_P, float(c["K_V"]), float(c["gamma"]), comm, bus - 1)
            if v is Variant.AVG_II:
                integral = self._comm(c.get("integral_comm", "complete"), "controller.integral_comm", grid)
                return ControllerSpec.avg2(K_P, float(c["K_V"]), float(c["gamma"]), comm, integral)
            K_V = _per_bus(c["K_V"], n, "controller.K_V")
            return ControllerSpec.avg3(K_P, K_V, float(c["gamma"]), float(c["delta"]), comm)
        except (ValueError, TypeError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"controller: {exc}") from None

    @property
    def delay_voltage_sum(self) -> bool:
        return bool(self.data["controller"].get("delay_voltage_sum", False))

    def objective(self) -> tuple[Optional[np.ndarray], Optional[np.ndarray]]:
        o, n = self.data.get("objective", {}), self.n
        F = _per_bus(o["F"], n, "objective.F") if "F" in o else None
        G = _per_bus(o["G"], n, "objective.G") if "G" in o else None
        return F, G

    def scenario(self) -> SimScenario:
        s, n = self.data["scenario"], self.n
        events = []
        for k, e in enumerate(s.get("events", [])):
            if not isinstance(e, dict) or "t" not in e or "I_inj" not in e:
                raise ConfigError(f"scenario.events[{k + 1}]: needs 't' and 'I_inj'")
            events.append((float(e["t"]), _per_bus(e["I_inj"], n, f"scenario.events[{k + 1}].I_inj")))
        V0 = _per_bus(s["V0"], n, "scenario.V0") if "V0" in s else None
        try:
            return SimScenario(
                _per_bus(s["I_inj_initial"], n, "scenario.I_inj_initial"),
                t_end=float(s["t_end"]),
                dt=float(s.get("dt", 1e-5)),
                tau=float(s.get("tau", 0.0)),
                events=tuple(events),
                V0=V0,
            )
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"scenario: {exc}") from None

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def dumps(self) -> str:
        return tomli_w.dumps(self.data)

    def with_value(self, path: str, value: Any) -> "RunConfig":
        """Copy with the dotted ``section.key`` set to ``value``."""
        data = self.to_dict()
        section, _, key = path.partition(".")
        if section not in SECTIONS or not key or "." in key:
            raise ConfigError(f"parameter path {path!r}: expected 'section.key' with section in {', '.join(SECTIONS)}")
        data.setdefault(section, {})[key] = value
        return RunConfig(data, self.source)


def _normalize(raw: dict) -> dict:
    issues = []
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        issues.append(f"unknown section(s): {', '.join(sorted(unknown))}")
    for name in ("grid", "controller", "scenario"):
        if not isinstance(raw.get(name), dict):
            issues.append(f"missing section [{name}]")
    if issues:
        raise ConfigError(issues)
    data = copy.deepcopy(raw)

    g = data["grid"]
    for key in ("n_buses", "capacitance", "v_nom", "lines"):
        if key not in g:
            issues.append(f"grid: missing '{key}'")
    if "n_buses" in g and (not isinstance(g["n_buses"], int) or g["n_buses"] < 2):
        issues.append("grid.n_buses: must be an integer >= 2")

    c = data["controller"]
    variant = c.get("variant")
    if variant not in CONTROLLER_KEYS:
        issues.append(f"controller.variant: expected one of {', '.join(CONTROLLER_KEYS)}, got {variant!r}")
    else:
        for key in REQUIRED[variant]:
            if key not in c:
                issues.append(f"controller: variant {variant} needs '{key}'")
        extra = set(c) - CONTROLLER_KEYS[variant]
        if extra:
            issues.append(f"controller: key(s) {', '.join(sorted(extra))} not used by variant {variant}")

    s = data["scenario"]
    for key in ("I_inj_initial", "t_end"):
        if key not in s:
            issues.append(f"scenario: missing '{key}'")

    data["output"] = {**OUTPUT_DEFAULTS, **data.get("output", {})}
    data["analysis"] = {**ANALYSIS_DEFAULTS, **data.get("analysis", {})}
    extra = set(data["output"]) - set(OUTPUT_DEFAULTS)
    if extra:
        issues.append(f"output: unknown key(s) {', '.join(sorted(extra))}")
    extra = set(data["analysis"]) - set(ANALYSIS_DEFAULTS)
    if extra:
        issues.append(f"analysis: unknown key(s) {', '.join(sorted(extra))}")
    if not isinstance(data["output"]["stride"], int) or data["output"]["stride"] < 1:
        issues.append("output.stride: must be a positive integer")
    if issues:
        raise ConfigError(issues)
    return data


def loads(text: str, source: Optional[Path] = None) -> RunConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source or '<config>'}: {exc}") from None
    return RunConfig(raw, source)


def load(path) -> RunConfig:
    path = Path(path)
    return loads(path.read_text(), path)


def shipped_config(name: str) -> Path:
    """Path of a bundled example config, e.g. ``shipped_config("fourbus_avg1")``."""
    here = Path(__file__).parent / "configs"
    p = here / (name if name.endswith(".cfg") else name + ".cfg")
    if not p.exists():
        raise FileNotFoundError(f"no shipped config {name!r}; available: {', '.join(sorted(x.stem for x in here.glob('*.cfg')))}")
    return p
