"""Static grid model: data, admittance matrix, power flow, datacenter attachment.

All network quantities are per unit on the system MVA base.  Generator
inertia ``H`` and damping ``D`` are stored on the machine MVA base, as they
appear on nameplates, and converted with :meth:`Generator.h_on` /
:meth:`Generator.d_on` where the dynamics need them.

A slack bus without a generator is an infinite bus: a fixed voltage source
in the dynamic simulation.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import connected_components

from dcosc.workload import WorkloadMix

DEFAULT_DAMPING = 2.0
BUNDLED_GRIDS = ("smib", "twoarea4m", "ninebus")


class GridError(ValueError):
    """Grid document failed validation."""


class PowerFlowError(RuntimeError):
    def __init__(self, message, mismatch=float("nan"), iterations=0):
        super().__init__(message)
        self.mismatch = mismatch
        self.iterations = iterations


@dataclass(frozen=True)
class Bus:
    id: int
    type: str  # "slack", "PV" or "PQ"
    base_kv: float = 1.0
    shunt_g: float = 0.0
    shunt_b: float = 0.0
    v_setpoint: float = 1.0  # only used for a slack bus without a generator


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float = 0.0  # total line charging
    tap: float | None = None  # off-nominal ratio on the from side


@dataclass(frozen=True)
class Generator:
    bus: int
    H: float  # s, machine base
    xd_prime: float  # pu, system base
    mva_base: float
    p_setpoint: float  # pu, system base
    v_setpoint: float = 1.0
    D: float = DEFAULT_DAMPING  # pu power per pu speed, machine base

    def h_on(self, s_base: float) -> float:
        return self.H * self.mva_base / s_base

    def d_on(self, s_base: float) -> float:
        return self.D * self.mva_base / s_base


@dataclass(frozen=True)
class Load:
    bus: int
    p_mw: float
    q_mvar: float = 0.0


@dataclass(frozen=True)
class GridModel:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    loads: tuple[Load, ...]
    mva_base: float = 100.0
    f_nominal_hz: float = 60.0
    # Fluctuating-load slots registered by datacenter attachment: (bus, nominal MW).
    fluct_slots: tuple[tuple[int, float], ...] = ()
    name: str = ""

    def __post_init__(self):
        for attr in ("buses", "branches", "generators", "loads", "fluct_slots"):
            object.__setattr__(self, attr, tuple(getattr(self, attr)))
        _validate(self)

    @property
    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    @property
    def bus_index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @property
    def slack_bus(self) -> Bus:
        return next(b for b in self.buses if b.type == "slack")

    @property
    def infinite_bus(self) -> Bus | None:
        """The slack bus when no generator sits on it, else None."""
        slack = self.slack_bus
        if any(g.bus == slack.id for g in self.generators):
            return None
        return slack

    @property
    def omega_s(self) -> float:
        return 2 * np.pi * self.f_nominal_hz

    def bus_load(self, bus: int) -> tuple[float, float]:
        """Constant (P MW, Q MVar) at ``bus``, excluding fluctuating slots."""
        p = sum(ld.p_mw for ld in self.loads if ld.bus == bus)
        q = sum(ld.q_mvar for ld in self.loads if ld.bus == bus)
        return p, q

    def slot_mw(self) -> dict[int, float]:
        out: dict[int, float] = {}
        for bus, mw in self.fluct_slots:
            out[bus] = out.get(bus, 0.0) + mw
        return out

    def to_dict(self) -> dict:
        doc = {
            "name": self.name,
            "mva_base": self.mva_base,
            "f_nominal_hz": self.f_nominal_hz,
            "buses": [{"id": b.id, "type": b.type, "base_kv": b.base_kv, "shunt_g": b.shunt_g,
                       "shunt_b": b.shunt_b, "v_setpoint": b.v_setpoint} for b in self.buses],
            "branches": [{"from": br.from_bus, "to": br.to_bus, "r": br.r, "x": br.x, "b": br.b,
                          **({"tap": br.tap} if br.tap is not None else {})}
                         for br in self.branches],
            "generators": [{"bus": g.bus, "H": g.H, "D": g.D, "xd_prime": g.xd_prime,
                            "mva_base": g.mva_base, "p_setpoint": g.p_setpoint,
                            "v_setpoint": g.v_setpoint} for g in self.generators],
            "loads": [{"bus": ld.bus, "p_mw": ld.p_mw, "q_mvar": ld.q_mvar} for ld in self.loads],
        }
        if self.fluct_slots:
            doc["fluct_slots"] = [{"bus": b, "p_mw": mw} for b, mw in self.fluct_slots]
        return doc


@dataclass(frozen=True)
class DatacenterSpec:
    """A datacenter replacing part of the existing load at ``bus``."""

    bus: int
    capacity_mw: float
    steady_fraction: float = 0.8
    fluct_fraction: float = 0.2
    mix: WorkloadMix | None = None

    def __post_init__(self):
        if self.capacity_mw < 0:
            raise GridError(f"datacenter capacity must be non-negative, got {self.capacity_mw}")
        if min(self.steady_fraction, self.fluct_fraction) < 0 or \
                abs(self.steady_fraction + self.fluct_fraction - 1.0) > 1e-9:
            raise GridError("steady and fluctuating fractions must be non-negative and sum to 1")

    @property
    def fluct_mw(self) -> float:
        return self.fluct_fraction * self.capacity_mw


@dataclass(frozen=True, eq=False)
class OperatingPoint:
    """Solved steady state of a :class:`GridModel`.

    Arrays follow ``grid.buses`` / ``grid.generators`` order.
    """

    voltage: np.ndarray  # complex bus voltages
    injection: np.ndarray  # complex net bus injections
    gen_power: np.ndarray  # complex generator outputs
    emf: np.ndarray  # internal EMF magnitude behind x'd
    rotor_angle: np.ndarray  # rad
    iterations: int
    mismatch: float
    meta: dict = field(default_factory=dict)

    @property
    def vmag(self) -> np.ndarray:
        return np.abs(self.voltage)

    @property
    def vang(self) -> np.ndarray:
        return np.angle(self.voltage)


GRID_SCHEMA = {
    "type": "object",
    "required": ["buses", "branches", "generators", "loads", "mva_base", "f_nominal_hz"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "mva_base": {"type": "number", "exclusiveMinimum": 0},
        "f_nominal_hz": {"type": "number", "exclusiveMinimum": 0},
        "buses": {"type": "array", "minItems": 1, "items": {
            "type": "object", "required": ["id", "type"], "additionalProperties": False,
            "properties": {
                "id": {"type": "integer"},
                "type": {"enum": ["slack", "PV", "PQ"]},
                "base_kv": {"type": "number", "exclusiveMinimum": 0},
                "shunt_g": {"type": "number"},
                "shunt_b": {"type": "number"},
                "v_setpoint": {"type": "number", "exclusiveMinimum": 0},
            }}},
        "branches": {"type": "array", "items": {
            "type": "object", "required": ["from", "to", "r", "x"], "additionalProperties": False,
            "properties": {
                "from": {"type": "integer"}, "to": {"type": "integer"},
                "r": {"type": "number"}, "x": {"type": "number"},
                "b": {"type": "number"},
                "tap": {"type": ["number", "null"], "exclusiveMinimum": 0},
            }}},
        "generators": {"type": "array", "items": {
            "type": "object", "additionalProperties": False,
            "required": ["bus", "H", "xd_prime", "mva_base", "p_setpoint"],
            "properties": {
                "bus": {"type": "integer"},
                "H": {"type": "number", "exclusiveMinimum": 0},
                "D": {"type": "number", "minimum": 0},
                "xd_prime": {"type": "number", "exclusiveMinimum": 0},
                "mva_base": {"type": "number", "exclusiveMinimum": 0},
                "p_setpoint": {"type": "number"},
                "v_setpoint": {"type": "number", "exclusiveMinimum": 0},
            }}},
        "loads": {"type": "array", "items": {
            "type": "object", "required": ["bus", "p_mw"], "additionalProperties": False,
            "properties": {
                "bus": {"type": "integer"},
                "p_mw": {"type": "number"},
                "q_mvar": {"type": "number"},
            }}},
        "fluct_slots": {"type": "array", "items": {
            "type": "object", "required": ["bus", "p_mw"], "additionalProperties": False,
            "properties": {"bus": {"type": "integer"}, "p_mw": {"type": "number", "minimum": 0}},
        }},
    },
}


def _validate(grid: GridModel):
    ids = [b.id for b in grid.buses]
    if len(set(ids)) != len(ids):
        raise GridError("duplicate bus ids")
    known = set(ids)
    slacks = [b for b in grid.buses if b.type == "slack"]
    if len(slacks) != 1:
        raise GridError(f"exactly one slack bus required, found {len(slacks)}")
    for br in grid.branches:
        if br.from_bus not in known or br.to_bus not in known:
            raise GridError(f"branch {br.from_bus}-{br.to_bus} references an unknown bus")
        if br.from_bus == br.to_bus:
            raise GridError(f"branch {br.from_bus}-{br.to_bus} is a self-loop")
    gen_buses = [g.bus for g in grid.generators]
    if len(set(gen_buses)) != len(gen_buses):
        raise GridError("at most one generator per bus is supported")
    for g in grid.generators:
        if g.bus not in known:
            raise GridError(f"generator references unknown bus {g.bus}")
        if not (g.H > 0 and g.xd_prime > 0 and g.mva_base > 0):
            raise GridError(f"generator at bus {g.bus} needs positive H, x'd and MVA base")
    for b in grid.buses:
        if b.type == "PV" and b.id not in gen_buses:
            raise GridError(f"PV bus {b.id} has no generator")
    for ld in grid.loads:
        if ld.bus not in known:
            raise GridError(f"load references unknown bus {ld.bus}")
    for bus, mw in grid.fluct_slots:
        if bus not in known:
            raise GridError(f"fluctuating slot references unknown bus {bus}")
    index = {bid: i for i, bid in enumerate(ids)}
    n = len(ids)
    if n > 1:
        rows = [index[br.from_bus] for br in grid.branches]
        cols = [index[br.to_bus] for br in grid.branches]
        adj = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        n_comp, _ = connected_components(adj, directed=False)
        if n_comp != 1:
            raise GridError(f"network is not connected ({n_comp} islands)")


def grid_from_dict(doc: dict) -> GridModel:
    try:
        jsonschema.validate(doc, GRID_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise GridError(f"schema violation: {exc.message}") from None
    return GridModel(
        buses=[Bus(id=b["id"], type=b["type"], base_kv=b.get("base_kv", 1.0),
                   shunt_g=b.get("shunt_g", 0.0), shunt_b=b.get("shunt_b", 0.0),
                   v_setpoint=b.get("v_setpoint", 1.0)) for b in doc["buses"]],
        branches=[Branch(br["from"], br["to"], br["r"], br["x"], br.get("b", 0.0), br.get("tap"))
                  for br in doc["branches"]],
        generators=[Generator(bus=g["bus"], H=g["H"], xd_prime=g["xd_prime"],
                              mva_base=g["mva_base"], p_setpoint=g["p_setpoint"],
                              v_setpoint=g.get("v_setpoint", 1.0),
                              D=g.get("D", DEFAULT_DAMPING)) for g in doc["generators"]],
        loads=[Load(ld["bus"], ld["p_mw"], ld.get("q_mvar", 0.0)) for ld in doc["loads"]],
        mva_base=doc["mva_base"],
        f_nominal_hz=doc["f_nominal_hz"],
        fluct_slots=[(s["bus"], s["p_mw"]) for s in doc.get("fluct_slots", [])],
        name=doc.get("name", ""),
    )


def load_grid(document) -> GridModel:
    """Build a validated grid from a dict, a JSON file path, or a bundled fixture name."""
    if isinstance(document, dict):
        return grid_from_dict(document)
    if isinstance(document, str) and document in BUNDLED_GRIDS:
        text = resources.files("dcosc").joinpath(f"grids/{document}.json").read_text()
        return grid_from_dict(json.loads(text))
    path = Path(document)
    if not path.exists() and path.stem in BUNDLED_GRIDS and path.parent.name == "grids":
        return load_grid(path.stem)
    return grid_from_dict(json.loads(path.read_text()))


def _branch_stamp(br: Branch):
    z = complex(br.r, br.x)
    if z == 0:
        raise GridError(f"branch {br.from_bus}-{br.to_bus} has zero series impedance")
    y = 1 / z
    t = br.tap or 1.0
    ysh = 0.5j * br.b
    return (y + ysh) / t**2, -y / t, -y / t, y + ysh


def build_ybus(grid: GridModel) -> sp.csr_matrix:
    """Complex bus admittance matrix (pi branch model, bus shunts included)."""
    idx = grid.bus_index
    n = len(grid.buses)
    rows, cols, vals = [], [], []
    for br in grid.branches:
        f, t = idx[br.from_bus], idx[br.to_bus]
        yff, yft, ytf, ytt = _branch_stamp(br)
        rows += [f, f, t, t]
        cols += [f, t, f, t]
        vals += [yff, yft, ytf, ytt]
    for i, b in enumerate(grid.buses):
        if b.shunt_g or b.shunt_b:
            rows.append(i)
            cols.append(i)
            vals.append(complex(b.shunt_g, b.shunt_b))
    return sp.coo_matrix((np.array(vals, dtype=complex), (rows, cols)), shape=(n, n)).tocsr()


def scheduled_injection(grid: GridModel) -> np.ndarray:
    """Specified complex injections (pu); fluctuating slots count at nominal."""
    idx = grid.bus_index
    s = np.zeros(len(grid.buses), dtype=complex)
    for g in grid.generators:
        s[idx[g.bus]] += g.p_setpoint
    for ld in grid.loads:
        s[idx[ld.bus]] -= complex(ld.p_mw, ld.q_mvar) / grid.mva_base
    for bus, mw in grid.fluct_slots:
        s[idx[bus]] -= mw / grid.mva_base
    return s


def power_mismatch(grid: GridModel, voltage: np.ndarray, ybus=None) -> np.ndarray:
    """Active/reactive mismatch at buses where it is specified (pu).

    Returns P mismatch at PV and PQ buses followed by Q mismatch at PQ buses.
    """
    ybus = build_ybus(grid) if ybus is None else ybus
    s_calc = voltage * np.conj(ybus @ voltage)
    ds = s_calc - scheduled_injection(grid)
    types = [b.type for b in grid.buses]
    pvpq = [i for i, t in enumerate(types) if t != "slack"]
    pq = [i for i, t in enumerate(types) if t == "PQ"]
    return np.concatenate([ds.real[pvpq], ds.imag[pq]])


def solve_power_flow(grid: GridModel, tol: float = 1e-10, max_iter: int = 50) -> OperatingPoint:
    """Newton-Raphson power flow in polar coordinates from a flat start.

    Raises:
        PowerFlowError: on divergence (carrying the final mismatch) or a
            singular Jacobian.
    """
    ybus = build_ybus(grid)
    idx = grid.bus_index
    n = len(grid.buses)
    vm = np.ones(n)
    for g in grid.generators:
        vm[idx[g.bus]] = g.v_setpoint
    slack = grid.slack_bus
    if grid.infinite_bus is not None:
        vm[idx[slack.id]] = slack.v_setpoint
    va = np.zeros(n)
    types = [b.type for b in grid.buses]
    pvpq = np.array([i for i, t in enumerate(types) if t != "slack"], dtype=int)
    pq = np.array([i for i, t in enumerate(types) if t == "PQ"], dtype=int)
    s_sched = scheduled_injection(grid)

    def mismatch(v):
        ds = v * np.conj(ybus @ v) - s_sched
        return np.concatenate([ds.real[pvpq], ds.imag[pq]])

    v = vm * np.exp(1j * va)
    f = mismatch(v)
    norm = float(np.max(np.abs(f))) if f.size else 0.0
    it = 0
    while norm >= tol:
        if it >= max_iter:
            raise PowerFlowError(f"power flow did not converge in {max_iter} iterations "
                                 f"(mismatch {norm:.3e} pu)", norm, it)
        it += 1
        ibus = ybus @ v
        dv = sp.diags(v)
        dvn = sp.diags(v / np.abs(v))
        ds_dva = 1j * dv @ (sp.diags(ibus) - ybus @ dv).conj()
        ds_dvm = dv @ (ybus @ dvn).conj() + sp.diags(np.conj(ibus)) @ dvn
        jac = sp.bmat([
            [ds_dva[pvpq][:, pvpq].real, ds_dvm[pvpq][:, pq].real],
            [ds_dva[pq][:, pvpq].imag, ds_dvm[pq][:, pq].imag],
        ], format="csc")
        try:
            dx = spla.spsolve(jac, -f)
        except RuntimeError as exc:  # factorization failure
            raise PowerFlowError(f"singular power-flow Jacobian: {exc}", norm, it) from None
        dx = np.atleast_1d(dx)
        if not np.all(np.isfinite(dx)):
            raise PowerFlowError("singular power-flow Jacobian", norm, it)
        va[pvpq] += dx[:pvpq.size]
        vm[pq] += dx[pvpq.size:]
        v = vm * np.exp(1j * va)
        f = mismatch(v)
        norm = float(np.max(np.abs(f)))
        if not np.isfinite(norm):
            raise PowerFlowError("power flow diverged", norm, it)

    injection = v * np.conj(ybus @ v)
    gen_power = np.empty(len(grid.generators), dtype=complex)
    emf = np.empty(len(grid.generators))
    angle = np.empty(len(grid.generators))
    for k, g in enumerate(grid.generators):
        i = idx[g.bus]
        p_load, q_load = grid.bus_load(g.bus)
        s_load = complex(p_load, q_load) / grid.mva_base + grid.slot_mw().get(g.bus, 0.0) / grid.mva_base
        gen_power[k] = injection[i] + s_load
        current = np.conj(gen_power[k] / v[i])
        e = v[i] + 1j * g.xd_prime * current
        emf[k] = abs(e)
        angle[k] = np.angle(e)
    return OperatingPoint(voltage=v, injection=injection, gen_power=gen_power, emf=emf,
                          rotor_angle=angle, iterations=it, mismatch=norm)


def attach_datacenter(grid: GridModel, dc: DatacenterSpec) -> GridModel:
    """Replace ``dc.capacity_mw`` of constant load at ``dc.bus`` by a datacenter.

    The steady share stays a constant load; the fluctuating share becomes a
    slot whose nominal value restores the original bus total.
    """
    if dc.bus not in grid.bus_index:
        raise GridError(f"bus {dc.bus} not found")
    if dc.capacity_mw == 0:
        return grid
    p, q = grid.bus_load(dc.bus)
    if dc.capacity_mw > p + 1e-9:
        raise GridError(f"datacenter capacity {dc.capacity_mw} MW exceeds load {p} MW at bus {dc.bus}")
    new_p = p - dc.capacity_mw + dc.steady_fraction * dc.capacity_mw
    loads = [ld for ld in grid.loads if ld.bus != dc.bus] + [Load(dc.bus, new_p, q)]
    slots = list(grid.fluct_slots) + [(dc.bus, dc.fluct_mw)]
    return replace(grid, loads=loads, fluct_slots=slots)


def scale_inertia(grid: GridModel, factor: float) -> GridModel:
    if not factor > 0:
        raise GridError(f"inertia factor must be positive, got {factor}")
    if factor == 1.0:
        return grid
    return replace(grid, generators=[replace(g, H=g.H * factor) for g in grid.generators])


def system_inertia(grid: GridModel) -> float:
    """MVA-weighted mean inertia constant of all generators, in seconds."""
    if not grid.generators:
        raise GridError("grid has no generators")
    return sum(g.H * g.mva_base for g in grid.generators) / sum(g.mva_base for g in grid.generators)
