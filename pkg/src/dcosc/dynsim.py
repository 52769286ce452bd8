"""Classical-model multi-machine simulation under fluctuating datacenter load.

Each generator is a constant EMF behind its transient reactance with
second-order swing dynamics (speed in per unit)::

    d(delta)/dt = omega_s * (omega - 1)
    2H d(omega)/dt = Pm - Pe - D * (omega - 1)

Constant loads become shunt admittances at their operating-point voltage.
Fluctuating datacenter slots stay constant-power injections, solved by a
fixed-point iteration on the slot-bus voltages at every right-hand-side
evaluation.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import scipy.linalg as la

from dcosc.netmodel import GridModel, OperatingPoint, build_ybus, power_mismatch, solve_power_flow
from dcosc.workload import PowerTrace

EQUILIBRIUM_TOL = 1e-10


class SimulationError(ValueError):
    """Invalid simulation request (bad options, forcing or initial state)."""


class InitializationError(SimulationError):
    pass


class NetworkSolveError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimOptions:
    dt: float = 0.01
    horizon: float = 60.0
    integrator: str = "rk4"
    tol: float = 1e-8
    voltage_floor: float = 0.4
    max_network_iter: int = 20

    def __post_init__(self):
        if not self.dt > 0:
            raise SimulationError(f"dt must be positive, got {self.dt}")
        if not self.horizon >= self.dt:
            raise SimulationError("horizon must be at least one step")
        if not self.tol > 0:
            raise SimulationError("network tolerance must be positive")
        if self.integrator not in ("rk4", "trapezoidal"):
            raise SimulationError(f"unknown integrator {self.integrator!r}")


@dataclass(frozen=True, eq=False)
class DynamicState:
    delta: np.ndarray  # rotor angles, rad
    omega: np.ndarray  # speeds, pu
    emf: np.ndarray  # internal EMF magnitudes, pu
    pm: np.ndarray  # mechanical power, pu on system base

    def vector(self) -> np.ndarray:
        return np.concatenate([self.delta, self.omega])


@dataclass(frozen=True, eq=False)
class SimResult:
    """Trajectories of one run; every array shares the ``time`` axis."""

    time: np.ndarray
    freq_hz: np.ndarray  # (steps, n_gen)
    angle: np.ndarray  # (steps, n_gen)
    vmag: np.ndarray  # (steps, n_bus)
    gen_buses: tuple[int, ...]
    bus_ids: tuple[int, ...]
    f_nominal_hz: float
    meta: dict = field(default_factory=dict)

    @property
    def aborted(self) -> bool:
        return bool(self.meta.get("aborted", False))

    @property
    def dt(self) -> float:
        return float(self.time[1] - self.time[0]) if self.time.size > 1 else float("nan")

    def freq_deviation(self) -> np.ndarray:
        return self.freq_hz - self.f_nominal_hz

    def window(self, t_start: float = 0.0, t_end: float | None = None) -> np.ndarray:
        """Boolean mask of samples with ``t_start <= t <= t_end``."""
        t_end = self.time[-1] if t_end is None else t_end
        return (self.time >= t_start - 1e-9) & (self.time <= t_end + 1e-9)

    def write_csv(self, out_dir, prefix: str = "") -> list[Path]:
        """Write ``freq``, ``angle`` and ``vmag`` CSVs plus a JSON metadata sidecar."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        gen_cols = [f"gen_{b}" for b in self.gen_buses]
        bus_cols = [f"bus_{b}" for b in self.bus_ids]
        paths = []
        for name, data, cols in (("freq", self.freq_hz, gen_cols),
                                 ("angle", self.angle, gen_cols),
                                 ("vmag", self.vmag, bus_cols)):
            path = out / f"{prefix}{name}.csv"
            _write_matrix(path, self.time, data, cols)
            paths.append(path)
        path = out / f"{prefix}meta.json"
        meta = dict(self.meta, gen_buses=list(self.gen_buses), bus_ids=list(self.bus_ids),
                    f_nominal_hz=self.f_nominal_hz, samples=int(self.time.size))
        path.write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
        paths.append(path)
        return paths


def _write_matrix(path, time, data, cols):
    lines = [",".join(["time_s", *cols])]
    for t, row in zip(time, data):
        lines.append(",".join([repr(float(t)), *(repr(float(v)) for v in row)]))
    Path(path).write_text("\n".join(lines) + "\n")


class SwingSystem:
    """Right-hand side of the swing equations with the network folded in.

    The network is reduced once: bus voltages are an affine function of the
    generator internal voltages and the slot currents, so each evaluation
    only iterates on the (few) slot buses.
    """

    def __init__(self, grid: GridModel, op: OperatingPoint, tol: float = 1e-8,
                 max_iter: int = 20):
        self.grid = grid
        self.tol = tol
        self.max_iter = max_iter
        idx = grid.bus_index
        n = len(grid.buses)
        sb = grid.mva_base
        gens = grid.generators
        self.n_gen = len(gens)
        self.omega_s = grid.omega_s
        self.h = np.array([g.h_on(sb) for g in gens])
        self.d = np.array([g.d_on(sb) for g in gens])

        v_op = op.voltage
        y = build_ybus(grid).toarray()
        for ld in grid.loads:
            i = idx[ld.bus]
            y[i, i] += complex(ld.p_mw, -ld.q_mvar) / sb / abs(v_op[i]) ** 2
        self.y_gen = np.array([1 / (1j * g.xd_prime) for g in gens])
        gen_pos = [idx[g.bus] for g in gens]
        for k, i in enumerate(gen_pos):
            y[i, i] += self.y_gen[k]

        inf = grid.infinite_bus
        keep = [i for i in range(n) if inf is None or i != idx[inf.id]]
        pos = {i: k for k, i in enumerate(keep)}
        z = la.inv(y[np.ix_(keep, keep)])
        c = np.zeros(len(keep), dtype=complex)
        if inf is not None:
            c = -y[keep, idx[inf.id]] * v_op[idx[inf.id]]
        slots = grid.slot_mw()
        if inf is not None and inf.id in slots:
            raise SimulationError("a fluctuating slot cannot sit on the infinite bus")
        self.slot_buses = tuple(slots)
        self.slot_nominal = np.array([slots[b] / sb for b in self.slot_buses])
        g_rows = [pos[i] for i in gen_pos]
        f_rows = [pos[idx[b]] for b in self.slot_buses]

        a_e = z[:, g_rows] * self.y_gen  # bus voltage per unit internal voltage
        v0 = z @ c
        z_f = z[:, f_rows]
        self._keep = np.array(keep)
        self._n_bus = n
        self._inf = None if inf is None else (idx[inf.id], v_op[idx[inf.id]])
        self._a_e, self._v0, self._z_f = a_e, v0, z_f
        self._ae_g, self._v0_g, self._zf_g = a_e[g_rows], v0[g_rows], z_f[g_rows]
        self._ae_f, self._v0_f, self._zf_f = a_e[f_rows], v0[f_rows], z_f[f_rows]
        self._v_f = v_op[[idx[b] for b in self.slot_buses]].astype(complex)

        self.emf = np.asarray(op.emf, dtype=float).copy()
        self.pm = np.zeros(self.n_gen)
        self.pm = self.electrical_power(np.asarray(op.rotor_angle, dtype=float), self.slot_nominal)

    def _slot_voltage(self, e: np.ndarray, p_f: np.ndarray):
        if not self.slot_buses:
            return self._v_f, np.zeros(0, dtype=complex)
        base = self._ae_f @ e + self._v0_f
        v = self._v_f
        for _ in range(self.max_iter):
            i_f = -p_f / np.conj(v)
            v_new = base + self._zf_f @ i_f
            if np.max(np.abs(v_new - v)) < self.tol:
                v = v_new
                self._v_f = v
                return v, -p_f / np.conj(v)
            v = v_new
        raise NetworkSolveError(f"slot-bus voltages did not converge in {self.max_iter} iterations")

    def electrical_power(self, delta: np.ndarray, p_f: np.ndarray) -> np.ndarray:
        e = self.emf * np.exp(1j * delta)
        _, i_f = self._slot_voltage(e, p_f)
        v_g = self._ae_g @ e + self._v0_g
        if i_f.size:
            v_g = v_g + self._zf_g @ i_f
        return (e * np.conj(self.y_gen * (e - v_g))).real

    def rhs(self, x: np.ndarray, p_f: np.ndarray) -> np.ndarray:
        n = self.n_gen
        delta, omega = x[:n], x[n:]
        pe = self.electrical_power(delta, p_f)
        slip = omega - 1.0
        return np.concatenate([self.omega_s * slip,
                               (self.pm - pe - self.d * slip) / (2.0 * self.h)])

    def bus_voltages(self, delta: np.ndarray, p_f: np.ndarray) -> np.ndarray:
        e = self.emf * np.exp(1j * delta)
        _, i_f = self._slot_voltage(e, p_f)
        v_keep = self._a_e @ e + self._v0
        if i_f.size:
            v_keep = v_keep + self._z_f @ i_f
        v = np.empty(self._n_bus, dtype=complex)
        v[self._keep] = v_keep
        if self._inf is not None:
            v[self._inf[0]] = self._inf[1]
        return v


def _check_pairing(grid: GridModel, op: OperatingPoint):
    if op.voltage.size != len(grid.buses) or op.emf.size != len(grid.generators):
        raise InitializationError("operating point does not match the grid dimensions")
    mism = power_mismatch(grid, op.voltage)
    if mism.size and np.max(np.abs(mism)) > 1e-6:
        raise InitializationError(
            f"operating point is not a power-flow solution of this grid "
            f"(mismatch {np.max(np.abs(mism)):.3e} pu)")


def equilibrium_residual(system: SwingSystem, state: DynamicState) -> float:
    """Largest |d(omega)/dt| (pu/s) at ``state`` with slots at nominal."""
    saved = system.emf, system.pm
    system.emf, system.pm = state.emf, state.pm
    try:
        dx = system.rhs(state.vector(), system.slot_nominal)
    finally:
        system.emf, system.pm = saved
    return float(np.max(np.abs(dx[system.n_gen:]))) if system.n_gen else 0.0


def initialize_dynamics(grid: GridModel, op: OperatingPoint,
                        tol: float = EQUILIBRIUM_TOL) -> DynamicState:
    """Equilibrium state consistent with ``op``; raises if it is not one."""
    _check_pairing(grid, op)
    system = SwingSystem(grid, op)
    state = DynamicState(delta=np.asarray(op.rotor_angle, dtype=float).copy(),
                         omega=np.ones(len(grid.generators)), emf=system.emf.copy(),
                         pm=system.pm.copy())
    check_equilibrium(system, state, tol)
    return state


def check_equilibrium(system: SwingSystem, state: DynamicState, tol: float = EQUILIBRIUM_TOL):
    res = equilibrium_residual(system, state)
    if not res < tol:
        raise InitializationError(f"initial state is not an equilibrium: max |domega/dt| = {res:.3e}")
    return res


def _forcing_schedule(grid, system, forcings, opts, n_steps):
    slots = set(system.slot_buses)
    for bus in forcings:
        if bus not in slots:
            raise SimulationError(f"no fluctuating slot registered at bus {bus}")
    sched = np.tile(system.slot_nominal, (n_steps + 1, 1))
    t = opts.dt * np.arange(n_steps + 1)
    for bus, trace in forcings.items():
        ratio = opts.dt / trace.dt
        if abs(ratio - round(ratio)) > 1e-9 and abs(1 / ratio - round(1 / ratio)) > 1e-9:
            raise SimulationError(f"trace dt {trace.dt} and step {opts.dt} are not commensurate")
        if trace.t0 > 1e-9 or trace.t0 + trace.duration < opts.horizon - 1e-9:
            raise SimulationError(f"forcing trace at bus {bus} does not cover the horizon")
        k = np.floor((t - trace.t0) / trace.dt + 1e-9).astype(int)
        k = np.clip(k, 0, len(trace) - 1)
        sched[:, system.slot_buses.index(bus)] = trace.values[k] / grid.mva_base
    return sched


def simulate(grid: GridModel, forcings: Mapping[int, PowerTrace] | None = None,
             opts: SimOptions | None = None, op: OperatingPoint | None = None,
             initial_state: DynamicState | None = None, seed: int | None = None,
             scenario_id: str | None = None) -> SimResult:
    """Integrate the swing equations with slot powers following ``forcings``.

    Unforced slots hold their nominal value.  Traces are applied by
    zero-order hold at the start of each step.  Network non-convergence,
    voltages below ``opts.voltage_floor`` and non-finite states end the run
    early with ``meta["aborted"]`` set; the trajectories up to that point are
    returned.
    """
    opts = opts or SimOptions()
    forcings = dict(forcings or {})
    op = op if op is not None else solve_power_flow(grid)
    _check_pairing(grid, op)
    system = SwingSystem(grid, op, tol=opts.tol, max_iter=opts.max_network_iter)
    if initial_state is None:
        initial_state = DynamicState(np.asarray(op.rotor_angle, float).copy(),
                                     np.ones(system.n_gen), system.emf.copy(), system.pm.copy())
    else:
        system.emf = np.asarray(initial_state.emf, float).copy()
        system.pm = np.asarray(initial_state.pm, float).copy()

    n_steps = int(round(opts.horizon / opts.dt))
    sched = _forcing_schedule(grid, system, forcings, opts, n_steps)
    n = system.n_gen
    dt = opts.dt
    time = dt * np.arange(n_steps + 1)
    states = np.empty((n_steps + 1, 2 * n))
    vmag = np.empty((n_steps + 1, len(grid.buses)))
    x = initial_state.vector().astype(float)
    reason = None
    last = -1
    abort_k = None

    newton = None
    if opts.integrator == "trapezoidal":
        jac = _numerical_jacobian(system, x, sched[0])
        newton = la.lu_factor(np.eye(2 * n) - 0.5 * dt * jac)

    for k in range(n_steps + 1):
        try:
            f0 = system.rhs(x, sched[k])
            v = np.abs(system.bus_voltages(x[:n], sched[k]))
        except NetworkSolveError as exc:
            reason = f"network solve failed: {exc}"
            break
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(f0)) and np.all(np.isfinite(v))):
            reason = "non-finite state"
            break
        states[k] = x
        vmag[k] = v
        last = k
        if v.min() < opts.voltage_floor:
            reason = f"low voltage: {v.min():.3f} pu below floor {opts.voltage_floor}"
            break
        if k == n_steps:
            break
        p = sched[k]
        try:
            if newton is None:
                k1 = f0
                k2 = system.rhs(x + 0.5 * dt * k1, p)
                k3 = system.rhs(x + 0.5 * dt * k2, p)
                k4 = system.rhs(x + dt * k3, p)
                x = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            else:
                x = _trapezoidal_step(system, x, f0, p, dt, newton)
        except NetworkSolveError as exc:
            reason = f"network solve failed: {exc}"
            break

    aborted = reason is not None
    if aborted:
        abort_k = k
    keep = slice(0, last + 1)
    states = states[keep]
    meta = {"seed": seed, "scenario_id": scenario_id, "aborted": aborted,
            "abort_time": float(time[abort_k]) if aborted else None,
            "abort_reason": reason, "integrator": opts.integrator, "dt": dt,
            "horizon": opts.horizon}
    return SimResult(time=time[keep], freq_hz=grid.f_nominal_hz * states[:, n:],
                     angle=states[:, :n], vmag=vmag[keep],
                     gen_buses=tuple(g.bus for g in grid.generators),
                     bus_ids=tuple(grid.bus_ids), f_nominal_hz=grid.f_nominal_hz, meta=meta)


def _numerical_jacobian(system: SwingSystem, x, p, h: float = 1e-7):
    m = x.size
    jac = np.empty((m, m))
    for j in range(m):
        step = np.zeros(m)
        step[j] = h
        jac[:, j] = (system.rhs(x + step, p) - system.rhs(x - step, p)) / (2 * h)
    return jac


def _trapezoidal_step(system, x, f0, p, dt, lu, max_iter: int = 50, tol: float = 1e-13):
    # Chord Newton on g(y) = y - x - dt/2 (f(x) + f(y)) with a frozen Jacobian.
    y = x + dt * f0
    for _ in range(max_iter):
        g = y - x - 0.5 * dt * (f0 + system.rhs(y, p))
        dy = la.lu_solve(lu, g)
        y = y - dy
        if np.max(np.abs(dy)) < tol * max(1.0, np.max(np.abs(y))):
            return y
    raise NetworkSolveError("trapezoidal corrector did not converge")


def peak_to_peak(series, time=None, window: tuple[float, float] | None = None) -> float:
    """Max minus min of ``series``, optionally restricted to ``window`` (needs ``time``)."""
    x = np.asarray(series, dtype=float)
    if window is not None:
        if time is None:
            raise ValueError("a window needs the time axis")
        t = np.asarray(time, dtype=float)
        x = x[(t >= window[0] - 1e-9) & (t <= window[1] + 1e-9)]
    if x.size == 0:
        raise ValueError("empty series or analysis window")
    return float(x.max() - x.min())
