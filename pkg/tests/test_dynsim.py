import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq

from dcosc import dynsim, modal
from dcosc import netmodel as nm
from dcosc.workload import PowerTrace

from conftest import smib_document
from oracles import SLOT_MW, forced_smib, sine_trace, speed_gain, state_space, steady_amplitude


class TestInitialization:
    def test_ninebus_equilibrium(self, ninebus, ninebus_op):
        state = dynsim.initialize_dynamics(ninebus, ninebus_op)
        system = dynsim.SwingSystem(ninebus, ninebus_op)
        dx = system.rhs(state.vector(), system.slot_nominal)
        assert np.max(np.abs(dx)) < 1e-10

    def test_smib_zero_acceleration(self):
        grid = nm.load_grid(smib_document(p_mw=80.0, load_mw=30.0))
        op = nm.solve_power_flow(grid)
        state = dynsim.initialize_dynamics(grid, op)
        system = dynsim.SwingSystem(grid, op)
        assert system.pm[0] == pytest.approx(0.8, abs=1e-10)
        assert dynsim.equilibrium_residual(system, state) < 1e-12

    def test_perturbed_emf_detected(self, ninebus, ninebus_op):
        state = dynsim.initialize_dynamics(ninebus, ninebus_op)
        system = dynsim.SwingSystem(ninebus, ninebus_op)
        bad = dynsim.DynamicState(state.delta, state.omega, state.emf * 1.01, state.pm)
        with pytest.raises(dynsim.InitializationError):
            dynsim.check_equilibrium(system, bad)

    def test_mismatched_operating_point(self, ninebus):
        other = nm.load_grid("smib")
        with pytest.raises(dynsim.InitializationError):
            dynsim.initialize_dynamics(ninebus, nm.solve_power_flow(other))

    def test_op_from_another_loading(self, ninebus, ninebus_op):
        doc = ninebus.to_dict()
        doc["loads"][0]["p_mw"] += 30.0
        with pytest.raises(dynsim.InitializationError, match="power-flow"):
            dynsim.initialize_dynamics(nm.load_grid(doc), ninebus_op)


class TestUnforced:
    @pytest.mark.parametrize("integrator", ["rk4", "trapezoidal"])
    def test_equilibrium_persists(self, ninebus, integrator):
        res = dynsim.simulate(ninebus, opts=dynsim.SimOptions(horizon=60.0,
                                                              integrator=integrator))
        assert not res.aborted
        assert res.time[-1] == pytest.approx(60.0)
        assert np.max(np.abs(res.freq_deviation())) < 1e-8

    def test_step_halving(self, ninebus):
        a = dynsim.simulate(ninebus, opts=dynsim.SimOptions(dt=0.01, horizon=5.0))
        b = dynsim.simulate(ninebus, opts=dynsim.SimOptions(dt=0.005, horizon=5.0))
        assert np.max(np.abs(a.freq_hz - b.freq_hz[::2])) < 1e-6

    def test_fourth_order_convergence(self, ninebus, ninebus_op):
        # A displaced rotor makes the check non-trivial; RK4 errors shrink ~16x per halving.
        state = dynsim.initialize_dynamics(ninebus, ninebus_op)
        kicked = dynsim.DynamicState(state.delta + np.array([0.0, 0.02, 0.0]), state.omega,
                                     state.emf, state.pm)
        runs = [dynsim.simulate(ninebus, opts=dynsim.SimOptions(dt=dt, horizon=2.0),
                                initial_state=kicked).freq_hz for dt in (0.02, 0.01, 0.005)]
        coarse = np.max(np.abs(runs[0] - runs[1][::2]))
        fine = np.max(np.abs(runs[1] - runs[2][::2]))
        assert coarse / fine == pytest.approx(16.0, rel=0.25)

    def test_energy_conserved_without_damping(self):
        grid = nm.load_grid(smib_document(d=0.0, p_mw=50.0))
        op = nm.solve_power_flow(grid)
        state = dynsim.initialize_dynamics(grid, op)
        kicked = dynsim.DynamicState(state.delta + 0.1, state.omega, state.emf, state.pm)
        res = dynsim.simulate(grid, opts=dynsim.SimOptions(horizon=20.0), initial_state=kicked)
        system = dynsim.SwingSystem(grid, op)
        h = system.h[0]
        slip = res.freq_hz[:, 0] / 60.0 - 1.0
        kinetic = h * grid.omega_s * slip ** 2
        # Potential energy as the path integral of (Pe - Pm) d(delta); trapezoid rule.
        pe = np.array([system.electrical_power(np.array([d]), system.slot_nominal)[0]
                       for d in res.angle[:, 0]])
        integrand = pe - system.pm[0]
        dd = np.diff(res.angle[:, 0])
        potential = np.concatenate([[0.0], np.cumsum(0.5 * (integrand[1:] + integrand[:-1]) * dd)])
        total = kinetic + potential
        swing = np.ptp(potential)
        assert np.max(np.abs(total - total[0])) < 1e-3 * swing


class TestForced:
    def test_quasi_static_angle(self):
        grid, op = forced_smib()
        fn = modal.eigen_modes(modal.linearize(grid, op))[0].frequency_hz
        f = 0.1 * fn
        res = dynsim.simulate(grid, {2: sine_trace(SLOT_MW, 5.0, f, 60.0)},
                              dynsim.SimOptions(horizon=60.0))
        sim_amp = steady_amplitude(res.angle[:, 0], res.time, 30.0)

        # Hand-written network: E/_d -- j0.35 -- bus 2 (constant P load) -- j0.15 -- 1/_0.
        e_mag = op.emf[0]
        pm = 0.5

        def pe(delta, p_load):
            e = e_mag * np.exp(1j * delta)

            def v2_residual(v):
                v2 = complex(*v)
                i_in = (e - v2) / 0.35j + (1.0 - v2) / 0.15j
                s = v2 * np.conj(i_in)
                return [s.real - p_load, s.imag]

            from scipy.optimize import fsolve
            v2 = complex(*fsolve(v2_residual, [1.0, 0.0], xtol=1e-12))
            return (e * np.conj((e - v2) / 0.35j)).real

        def angle_at(p_mw):
            return brentq(lambda d: pe(d, p_mw / 100.0) - pm, -0.5, 1.5, xtol=1e-13)

        static_amp = 0.5 * abs(angle_at(SLOT_MW + 5.0) - angle_at(SLOT_MW - 5.0))
        assert angle_at(SLOT_MW) == pytest.approx(op.rotor_angle[0], abs=1e-8)
        assert sim_amp == pytest.approx(static_amp, rel=0.10)

    def test_resonance_versus_double_frequency(self):
        grid, op = forced_smib()
        a, b = state_space(grid, op)
        fn = modal.eigen_modes(a)[0].frequency_hz
        amps = []
        for f in (fn, 2 * fn):
            res = dynsim.simulate(grid, {2: sine_trace(SLOT_MW, 0.5, f, 100.0)},
                                  dynsim.SimOptions(horizon=100.0))
            amps.append(steady_amplitude(res.freq_hz[:, 0], res.time, 70.0))
        oracle = speed_gain(a, b, fn) / speed_gain(a, b, 2 * fn)
        assert amps[0] >= 5 * amps[1]
        assert amps[0] / amps[1] == pytest.approx(oracle, rel=0.15)

    def test_linear_in_small_forcing(self, ninebus):
        grid = nm.attach_datacenter(ninebus, nm.DatacenterSpec(5, 100.0))
        t = np.arange(2000) * 0.01
        dev = np.sin(2 * np.pi * 1.2 * t) + 0.5 * np.sign(np.sin(2 * np.pi * 0.7 * t))
        responses = []
        for scale in (1.0, 2.0):
            trace = PowerTrace(dt=0.01, values=20.0 + scale * dev)
            res = dynsim.simulate(grid, {5: trace}, dynsim.SimOptions(horizon=19.99))
            responses.append(res.freq_deviation())
        ratio = np.linalg.norm(responses[1]) / np.linalg.norm(responses[0])
        assert ratio == pytest.approx(2.0, rel=0.05)
        np.testing.assert_allclose(responses[1], 2 * responses[0],
                                   atol=0.05 * np.abs(responses[1]).max())

    def test_integrators_agree(self):
        grid, op = forced_smib()
        trace = sine_trace(SLOT_MW, 2.0, 1.0, 10.0)
        runs = [dynsim.simulate(grid, {2: trace},
                                dynsim.SimOptions(horizon=10.0, integrator=i))
                for i in ("rk4", "trapezoidal")]
        dev = runs[0].freq_deviation()
        assert np.max(np.abs(dev - runs[1].freq_deviation())) < 0.02 * np.abs(dev).max()

    def test_deterministic(self, ninebus):
        grid = nm.attach_datacenter(ninebus, nm.DatacenterSpec(8, 50.0))
        rng = np.random.default_rng(0)
        trace = PowerTrace(dt=0.01, values=10.0 + rng.normal(0, 1, 500))
        a = dynsim.simulate(grid, {8: trace}, dynsim.SimOptions(horizon=4.99))
        b = dynsim.simulate(grid, {8: trace}, dynsim.SimOptions(horizon=4.99))
        assert a.freq_hz.tobytes() == b.freq_hz.tobytes()
        assert a.vmag.tobytes() == b.vmag.tobytes()

    def test_coarser_trace_is_held(self):
        grid, op = forced_smib()
        coarse = PowerTrace(dt=0.05, values=SLOT_MW + np.tile([1.0, -1.0], 60))
        fine = PowerTrace(dt=0.01, values=np.repeat(coarse.values, 5))
        a = dynsim.simulate(grid, {2: coarse}, dynsim.SimOptions(horizon=5.0))
        b = dynsim.simulate(grid, {2: fine}, dynsim.SimOptions(horizon=5.0))
        np.testing.assert_array_equal(a.freq_hz, b.freq_hz)


class TestAbortsAndErrors:
    def test_forcing_without_slot(self, ninebus):
        trace = PowerTrace(dt=0.01, values=np.ones(1000))
        with pytest.raises(dynsim.SimulationError, match="slot"):
            dynsim.simulate(ninebus, {5: trace}, dynsim.SimOptions(horizon=5.0))

    def test_trace_too_short(self):
        grid, _ = forced_smib()
        trace = PowerTrace(dt=0.01, values=np.full(100, SLOT_MW))
        with pytest.raises(dynsim.SimulationError, match="cover"):
            dynsim.simulate(grid, {2: trace}, dynsim.SimOptions(horizon=5.0))

    def test_incommensurate_dt(self):
        grid, _ = forced_smib()
        trace = PowerTrace(dt=0.003, values=np.full(3000, SLOT_MW))
        with pytest.raises(dynsim.SimulationError, match="commensurate"):
            dynsim.simulate(grid, {2: trace}, dynsim.SimOptions(horizon=5.0))

    @pytest.mark.parametrize("kw", [dict(dt=0.0), dict(horizon=0.001), dict(tol=0.0),
                                    dict(integrator="euler")])
    def test_bad_options(self, kw):
        with pytest.raises(ValueError):
            dynsim.SimOptions(**kw)

    def test_voltage_collapse_aborts(self):
        grid, _ = forced_smib()
        values = np.full(500, SLOT_MW)
        values[200:] = 400.0
        res = dynsim.simulate(grid, {2: PowerTrace(dt=0.01, values=values)},
                              dynsim.SimOptions(horizon=5.0))
        assert res.aborted
        assert res.meta["abort_time"] == pytest.approx(2.0, abs=0.011)
        assert res.time[-1] <= res.meta["abort_time"] + 1e-12
        assert res.meta["abort_reason"]
        assert np.all(np.isfinite(res.freq_hz))

    def test_low_voltage_floor(self):
        grid, _ = forced_smib()
        values = np.full(500, SLOT_MW)
        values[100:] = 300.0  # sags bus 2 to about 0.89 pu
        res = dynsim.simulate(grid, {2: PowerTrace(dt=0.01, values=values)},
                              dynsim.SimOptions(horizon=5.0, voltage_floor=0.95))
        assert res.aborted and "low voltage" in res.meta["abort_reason"]


class TestPeakToPeak:
    def test_constant(self):
        assert dynsim.peak_to_peak(np.full(10, 3.0)) == 0.0

    def test_sinusoid(self):
        t = np.arange(1000) * 0.01
        assert dynsim.peak_to_peak(0.1 * np.sin(2 * np.pi * t)) == pytest.approx(0.2, rel=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=200))
    def test_matches_scan(self, values):
        hi, lo = -math.inf, math.inf
        for v in values:
            hi, lo = max(hi, v), min(lo, v)
        assert dynsim.peak_to_peak(values) == hi - lo

    def test_window(self):
        t = np.arange(10.0)
        x = t ** 2
        assert dynsim.peak_to_peak(x, t, (2.0, 4.0)) == 12.0
        with pytest.raises(ValueError):
            dynsim.peak_to_peak(x, t, (20.0, 30.0))
        with pytest.raises(ValueError):
            dynsim.peak_to_peak([])


def test_write_csv(tmp_path, ninebus):
    res = dynsim.simulate(ninebus, opts=dynsim.SimOptions(horizon=1.0), seed=5,
                          scenario_id="unit")
    paths = res.write_csv(tmp_path)
    assert sorted(p.name for p in paths) == ["angle.csv", "freq.csv", "meta.json", "vmag.csv"]
    header = (tmp_path / "freq.csv").read_text().splitlines()[0]
    assert header == "time_s,gen_1,gen_2,gen_3"
    assert (tmp_path / "vmag.csv").read_text().splitlines()[0].startswith("time_s,bus_1,")
    meta = json.loads((tmp_path / "meta.json").read_text())
    assert meta["seed"] == 5 and meta["scenario_id"] == "unit" and meta["aborted"] is False
    data = np.loadtxt(tmp_path / "freq.csv", delimiter=",", skiprows=1)
    np.testing.assert_array_equal(data[:, 1:], res.freq_hz)
