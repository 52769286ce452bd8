import json

import numpy as np
import pytest
from click.testing import CliRunner

from dcosc import modal, workload
from dcosc.cli import main


@pytest.fixture
def run():
    runner = CliRunner()

    def invoke(*args):
        return runner.invoke(main, [str(a) for a in args], catch_exceptions=False)
    return invoke


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return path


def write_signal(path, cols, dt=0.01):
    n = len(next(iter(cols.values())))
    t = np.arange(n) * dt
    data = np.column_stack([t, *cols.values()])
    np.savetxt(path, data, delimiter=",", header=",".join(["time_s", *cols]), comments="")
    return path


class TestWorkload:
    def test_training_csv_matches_library(self, run, tmp_path):
        out = tmp_path / "t.csv"
        r = run("workload", "gen", "--kind", "training", "--horizon", 20, "--dt", 0.01,
                "--seed", 5, "--out", out)
        assert r.exit_code == 0, r.output
        got = workload.PowerTrace.from_csv(out)
        ref = workload.generate_trace(workload.TrainingParams(), 20.0, 0.01, 5)
        np.testing.assert_array_equal(got.values, ref.values)

    def test_params_file_and_json_output(self, run, tmp_path):
        params = write_json(tmp_path / "p.json", {"sigma_zeta": 0, "sigma_delta_ft": 0,
                                                  "mu_delta_ft": 0.5, "sigma_eta_tail": 0,
                                                  "sigma_eta_idle": 0, "p_hat": 10})
        out = tmp_path / "f.json"
        r = run("workload", "gen", "--kind", "finetune", "--params", params, "--horizon", 10,
                "--dt", 0.01, "--seed", 1, "--out", out)
        assert r.exit_code == 0, r.output
        trace = workload.PowerTrace.from_json(out.read_text())
        assert set(np.round(np.unique(trace.values), 9)) == {5.0, 10.0}

    def test_mix(self, run, tmp_path):
        out = tmp_path / "m.csv"
        r = run("workload", "gen", "--kind", "mix", "--horizon", 10, "--dt", 0.01,
                "--seed", 2, "--out", out)
        assert r.exit_code == 0, r.output
        assert workload.PowerTrace.from_csv(out).values.size == 1000

    def test_bad_params_fatal(self, run, tmp_path):
        params = write_json(tmp_path / "p.json", {"f0_min": 2.0, "f0_max": 1.0})
        r = run("workload", "gen", "--kind", "training", "--params", params, "--horizon", 10,
                "--dt", 0.01, "--seed", 1, "--out", tmp_path / "x.csv")
        assert r.exit_code == 1
        assert "error" in r.output


class TestSimulate:
    def test_writes_trajectories(self, run, tmp_path):
        cfg = write_json(tmp_path / "s.json", {"grid": "ninebus", "horizon": 5.0,
                                               "datacenters": [{"bus": 5, "capacity_mw": 30}]})
        r = run("simulate", "--scenario", cfg, "--seed", 3, "--out", tmp_path / "o")
        assert r.exit_code == 0, r.output
        freq = np.genfromtxt(tmp_path / "o" / "freq.csv", delimiter=",", names=True)
        assert freq.dtype.names == ("time_s", "gen_1", "gen_2", "gen_3")
        meta = json.loads((tmp_path / "o" / "meta.json").read_text())
        assert meta["seed"] == 3 and meta["aborted"] is False

    def test_grid_override(self, run, tmp_path):
        cfg = write_json(tmp_path / "s.json", {"grid": "does-not-exist.json", "horizon": 2.0,
                                               "datacenters": [{"bus": 5, "capacity_mw": 30}]})
        r = run("simulate", "--grid", "ninebus", "--scenario", cfg, "--seed", 0,
                "--out", tmp_path / "o")
        assert r.exit_code == 0, r.output
        r = run("simulate", "--scenario", cfg, "--seed", 0, "--out", tmp_path / "p")
        assert r.exit_code == 1

    def test_abort_exit_code(self, run, tmp_path):
        cfg = write_json(tmp_path / "s.json", {"grid": "ninebus", "horizon": 2.0,
                                               "datacenters": [{"bus": 5, "capacity_mw": 30}],
                                               "simulation": {"voltage_floor": 0.9999}})
        r = run("simulate", "--scenario", cfg, "--seed", 0, "--out", tmp_path / "o")
        assert r.exit_code == 2
        assert "aborted" in r.output
        assert json.loads((tmp_path / "o" / "meta.json").read_text())["aborted"] is True


class TestAnalyze:
    t = np.arange(2000) * 0.01

    def test_prony(self, run, tmp_path):
        sig = write_signal(tmp_path / "x.csv",
                           {"gen_1": np.exp(-0.1 * self.t) * np.cos(2 * np.pi * 1.2 * self.t)})
        r = run("analyze", "prony", "--input", sig, "--discard-s", 0, "--order", 4)
        assert r.exit_code == 0, r.output
        modes = json.loads(r.output)
        assert modes[0]["frequency_hz"] == pytest.approx(1.2, rel=1e-3)
        assert modes[0]["sigma_per_s"] == pytest.approx(-0.1, rel=1e-2)
        r = run("analyze", "prony", "--input", sig, "--order", 4, "--csv",
                "--out", tmp_path / "m.csv")
        assert r.exit_code == 0
        assert (tmp_path / "m.csv").read_text().startswith("frequency_hz,")

    def test_prony_bad_order(self, run, tmp_path):
        sig = write_signal(tmp_path / "x.csv", {"a": np.sin(self.t[:40])})
        r = run("analyze", "prony", "--input", sig, "--order", 20)
        assert r.exit_code == 1

    def test_fft_column_and_window(self, run, tmp_path):
        sig = write_signal(tmp_path / "x.csv", {"a": np.zeros(self.t.size),
                                                "b": 0.5 * np.sin(2 * np.pi * 2.0 * self.t)})
        out = tmp_path / "s.csv"
        r = run("analyze", "fft", "--input", sig, "--column", "b", "--window", "hann",
                "--discard-s", 0, "--out", out)
        assert r.exit_code == 0, r.output
        data = np.loadtxt(out, delimiter=",", skiprows=1)
        k = int(np.argmax(data[:, 1]))
        assert data[k, 0] == pytest.approx(2.0) and data[k, 1] == pytest.approx(0.5, abs=1e-9)
        r = run("analyze", "fft", "--input", sig, "--column", "zz")
        assert r.exit_code == 1

    def test_eig_grid_and_matrix(self, run, tmp_path):
        r = run("analyze", "eig", "--input",
                write_json(tmp_path / "g.json", _ninebus_doc()))
        assert r.exit_code == 0, r.output
        freqs = [m["frequency_hz"] for m in json.loads(r.output)]
        assert freqs == pytest.approx([1.3828, 2.1261], abs=1e-4)
        a = tmp_path / "a.csv"
        np.savetxt(a, [[-0.1, 7.5398], [-7.5398, -0.1]], delimiter=",")
        r = run("analyze", "eig", "--input", a)
        (m,) = json.loads(r.output)
        assert m["frequency_hz"] == pytest.approx(1.2, abs=1e-4)
        np.savetxt(a, [[1.0, 2.0, 3.0]], delimiter=",")
        assert run("analyze", "eig", "--input", a).exit_code == 1

    def test_modeshape(self, run, tmp_path):
        x = np.sin(2 * np.pi * self.t)
        sig = write_signal(tmp_path / "x.csv", {"gen_1": x, "gen_2": -0.5 * x})
        r = run("analyze", "modeshape", "--input", sig, "--target-hz", 1.0)
        assert r.exit_code == 0, r.output
        doc = json.loads(r.output)
        assert doc["reference"] == "gen_1"
        assert abs(doc["entries"]["gen_2"]["phase_rad"]) == pytest.approx(np.pi, abs=0.01)
        assert doc["entries"]["gen_2"]["amplitude"] == pytest.approx(0.5, rel=1e-3)

    def test_non_uniform_time(self, run, tmp_path):
        p = tmp_path / "x.csv"
        p.write_text("time_s,a\n0,1\n0.01,2\n0.03,1\n")
        assert run("analyze", "fft", "--input", p).exit_code == 1


class TestScenario:
    base = {"grid": "ninebus", "datacenters": [{"bus": 5, "capacity_mw": 30}],
            "horizon": 6.0, "seeds": [0, 1]}

    def test_run(self, run, tmp_path):
        cfg = write_json(tmp_path / "s.json", self.base)
        r = run("scenario", "run", "--config", cfg, "--out", tmp_path / "o")
        assert r.exit_code == 0, r.output
        manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
        for f in manifest["files"]:
            assert (tmp_path / "o" / f["path"]).is_file()
        assert {"seed_0/freq.csv", "seed_1/freq.csv", "summary.json"} <= \
            {f["path"] for f in manifest["files"]}

    def test_relative_grid_path(self, run, tmp_path):
        grid = write_json(tmp_path / "mygrid.json", _ninebus_doc())
        cfg = write_json(tmp_path / "s.json", {**self.base, "grid": grid.name, "seeds": [0],
                                               "analyses": []})
        r = run("scenario", "run", "--config", cfg, "--out", tmp_path / "o")
        assert r.exit_code == 0, r.output

    def test_run_aborted_and_invalid(self, run, tmp_path):
        cfg = write_json(tmp_path / "s.json", {**self.base,
                                               "simulation": {"voltage_floor": 0.9999}})
        assert run("scenario", "run", "--config", cfg, "--out", tmp_path / "o").exit_code == 2
        bad = write_json(tmp_path / "b.json", {**self.base, "bogus": 1})
        assert run("scenario", "run", "--config", bad, "--out", tmp_path / "p").exit_code == 1

    def test_sweep(self, run, tmp_path):
        cfg = write_json(tmp_path / "s.json", {**self.base, "seeds": [0]})
        r = run("scenario", "sweep", "--config", cfg, "--factor", "inertia",
                "--levels", "[1.0, 0.5]", "--out", tmp_path / "o")
        assert r.exit_code == 0, r.output
        rows = (tmp_path / "o" / "comparison.csv").read_text().splitlines()
        assert len(rows) == 3
        assert (tmp_path / "o" / "level_1" / "seed_0" / "freq.csv").is_file()

    def test_sweep_level_failure(self, run, tmp_path):
        cfg = write_json(tmp_path / "s.json", {**self.base, "seeds": [0]})
        r = run("scenario", "sweep", "--config", cfg, "--factor", "penetration",
                "--levels", "[1.0, 20.0]", "--out", tmp_path / "o")
        assert r.exit_code == 2

    @pytest.mark.parametrize("extra", [["--factor", "inertia"], ["--levels", "[1]"],
                                       ["--factor", "inertia", "--levels", "{bad"],
                                       ["--factor", "inertia", "--levels", "3"]])
    def test_sweep_argument_errors(self, run, tmp_path, extra):
        cfg = write_json(tmp_path / "s.json", self.base)
        r = run("scenario", "sweep", "--config", cfg, *extra, "--out", tmp_path / "o")
        assert r.exit_code == 1


def _ninebus_doc():
    from dcosc import netmodel
    return netmodel.load_grid("ninebus").to_dict()


def test_help_lists_commands(run):
    r = run("--help")
    for name in ("workload", "simulate", "analyze", "scenario"):
        assert name in r.output
    assert modal.WINDOWS == ("rectangular", "hann")
