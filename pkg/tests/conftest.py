import pytest

from dcosc import netmodel as nm


def smib_document(h=3.0, d=2.0, x_total=0.5, p_mw=0.0, load_mw=0.0, f_nominal=60.0):
    """Generator behind ``x_total`` (split over x'd and two lines) to an infinite bus."""
    xd = 0.2 * x_total / 0.5
    line = (x_total - xd) / 2
    doc = {
        "name": "smib-test", "mva_base": 100.0, "f_nominal_hz": f_nominal,
        "buses": [{"id": 1, "type": "PV"}, {"id": 2, "type": "PQ"},
                  {"id": 3, "type": "slack", "v_setpoint": 1.0}],
        "branches": [{"from": 1, "to": 2, "r": 0.0, "x": line},
                     {"from": 2, "to": 3, "r": 0.0, "x": line}],
        "generators": [{"bus": 1, "H": h, "D": d, "xd_prime": xd, "mva_base": 100.0,
                        "p_setpoint": p_mw / 100.0, "v_setpoint": 1.0}],
        "loads": [{"bus": 2, "p_mw": load_mw, "q_mvar": 0.0}],
    }
    return doc


@pytest.fixture(scope="session")
def ninebus():
    return nm.load_grid("ninebus")


@pytest.fixture(scope="session")
def ninebus_op(ninebus):
    return nm.solve_power_flow(ninebus)


NINEBUS_MODE_HZ = 1.3828  # lowest eigenmode of the bundled 9-bus grid
NARROW_BAND = [NINEBUS_MODE_HZ - 0.05, NINEBUS_MODE_HZ + 0.05]
PAIRED_SEEDS = list(range(10))


class PairedRuns:
    """Ten-seed 9-bus batches shared by the scenario and acceptance tests.

    Each batch is run at most once per session.
    """

    def __init__(self):
        self._cache = {}

    @staticmethod
    def base(narrow=True):
        from dcosc import scenario
        doc = {"name": "paired", "grid": "ninebus",
               "datacenters": [{"bus": 5, "capacity_mw": 50.0}],
               "seeds": PAIRED_SEEDS, "horizon": 60.0}
        if narrow:
            doc["f0_range"] = NARROW_BAND
        return scenario.parse_scenario(doc)

    def get(self, narrow=True, factor=None, level=None):
        from dcosc import scenario
        key = (narrow, factor, repr(level))
        if key not in self._cache:
            cfg = self.base(narrow)
            if factor is not None:
                cfg = scenario.apply_level(cfg, factor, level)
            self._cache[key] = scenario.run_scenario(cfg)
        return self._cache[key]


@pytest.fixture(scope="session")
def paired():
    return PairedRuns()


# criterion number -> verdict line, filled by test_acceptance.py
ACCEPTANCE = {}
N_CRITERIA = 14


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        line = ACCEPTANCE.get(
            n, f"criterion {n:2d} NO VERDICT  (deselected, or errored before its check)")
        terminalreporter.write_line(line)
