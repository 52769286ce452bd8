"""Independent reference computations shared by several test modules."""
import numpy as np

from dcosc import dynsim
from dcosc import netmodel as nm
from dcosc.workload import PowerTrace

from conftest import smib_document

SLOT_MW = 20.0


def forced_smib(h=3.0, d=2.0, p_mw=50.0):
    """SMIB whose midpoint load is entirely a 20 MW fluctuating slot."""
    doc = smib_document(h=h, d=d, p_mw=p_mw, load_mw=SLOT_MW)
    grid = nm.attach_datacenter(nm.load_grid(doc),
                                nm.DatacenterSpec(2, SLOT_MW, steady_fraction=0.0,
                                                  fluct_fraction=1.0))
    return grid, nm.solve_power_flow(grid)


def sine_trace(nominal, amplitude, freq_hz, horizon, dt=0.01):
    t = np.arange(int(round(horizon / dt))) * dt
    return PowerTrace(dt=dt, values=nominal + amplitude * np.sin(2 * np.pi * freq_hz * t))


def state_space(grid, op, h=1e-6):
    """Central-difference A and B (slot input, pu) of the swing right-hand side."""
    system = dynsim.SwingSystem(grid, op)
    x0 = dynsim.initialize_dynamics(grid, op).vector()
    p0 = system.slot_nominal
    n = x0.size
    a = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        a[:, j] = (system.rhs(x0 + e, p0) - system.rhs(x0 - e, p0)) / (2 * h)
    b = np.empty((n, p0.size))
    for j in range(p0.size):
        e = np.zeros(p0.size)
        e[j] = h
        b[:, j] = (system.rhs(x0, p0 + e) - system.rhs(x0, p0 - e)) / (2 * h)
    return a, b


def speed_gain(a, b, freq_hz, gen=0, slot=0):
    """|G(j w)| from slot power (pu) to generator speed (pu)."""
    n = a.shape[0] // 2
    w = 2 * np.pi * freq_hz
    resp = np.linalg.solve(1j * w * np.eye(a.shape[0]) - a, b[:, slot])
    return abs(resp[n + gen])


def steady_amplitude(series, time, t_from):
    x = np.asarray(series)[time >= t_from]
    return 0.5 * (x.max() - x.min())


def power_mismatch(grid, v):
    """Mismatch written out bus by bus, without the package's vectorized routine."""
    y = np.zeros((len(grid.buses),) * 2, dtype=complex)
    idx = grid.bus_index
    for br in grid.branches:
        f, t = idx[br.from_bus], idx[br.to_bus]
        ys = 1 / complex(br.r, br.x)
        y[f, f] += ys + 0.5j * br.b
        y[t, t] += ys + 0.5j * br.b
        y[f, t] -= ys
        y[t, f] -= ys
    out = []
    for i, b in enumerate(grid.buses):
        s = v[i] * np.conj(y[i] @ v)
        sched = 0j
        for g in grid.generators:
            if g.bus == b.id:
                sched += g.p_setpoint
        for ld in grid.loads:
            if ld.bus == b.id:
                sched -= complex(ld.p_mw, ld.q_mvar) / grid.mva_base
        if b.type == "slack":
            continue
        out.append(s.real - sched.real)
        if b.type == "PQ":
            out.append(s.imag - sched.imag)
    return np.array(out)
