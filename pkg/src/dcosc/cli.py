"""Command-line entry point ``dcosc``."""
from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
import numpy as np

from dcosc import modal, netmodel, scenario, workload
from dcosc.dynsim import simulate

EXIT_ABORTED = 2
EXIT_FATAL = 1


def _fatal(msg: str):
    click.echo(f"error: {msg}", err=True)
    sys.exit(EXIT_FATAL)


@click.group()
@click.option("-v", "--verbose", count=True, help="Repeat for more logging.")
def main(verbose):
    """Datacenter-driven grid oscillation toolkit."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


# --- workload --------------------------------------------------------------

@main.group("workload")
def workload_group():
    """Stochastic AI workload traces."""


@workload_group.command("gen")
@click.option("--kind", type=click.Choice(["training", "finetune", "mix"]), required=True)
@click.option("--params", "params_path", type=click.Path(exists=True, dir_okay=False),
              help="JSON parameters; defaults apply when omitted.")
@click.option("--horizon", type=float, required=True, help="Seconds.")
@click.option("--dt", type=float, required=True, help="Seconds.")
@click.option("--seed", type=click.IntRange(0, 2 ** 64 - 1), required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True,
              help="Output file; .json for JSON, anything else for CSV.")
def workload_gen(kind, params_path, horizon, dt, seed, out):
    """Generate one workload trace."""
    doc = json.loads(Path(params_path).read_text()) if params_path else {}
    try:
        if kind == "mix":
            trace = workload.aggregate_ai_load(workload.mix_from_dict(doc or {"budget_mw": 1.0}),
                                               horizon, dt, seed)
        else:
            trace = workload.generate_trace(workload.params_from_dict(doc, kind), horizon, dt,
                                            seed)
    except (workload.WorkloadConfigError, TypeError) as exc:
        _fatal(str(exc))
    workload.write_trace(trace, out)
    if trace.meta.get("clamped"):
        click.echo(f"warning: {trace.meta['clamped']} negative samples clamped to 0", err=True)


# --- simulate --------------------------------------------------------------

@main.command("simulate")
@click.option("--grid", "grid_ref", help="Grid file or bundled name; overrides the scenario's.")
@click.option("--scenario", "scenario_path", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--seed", type=click.IntRange(0, 2 ** 64 - 1), required=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
def simulate_cmd(grid_ref, scenario_path, seed, out):
    """Run one forced simulation and write its trajectories."""
    from dataclasses import replace
    try:
        cfg = scenario.parse_scenario(scenario_path)
        if grid_ref:
            cfg = replace(cfg, grid=grid_ref, base_dir=None)
        grid, op, sites = scenario.prepare_grid(cfg)
        forcings = scenario.site_traces(cfg, sites, seed)
    except (scenario.ScenarioError, workload.WorkloadConfigError) as exc:
        _fatal(str(exc))
    opts = replace(cfg.sim, dt=cfg.dt, horizon=cfg.horizon)
    res = simulate(grid, forcings, opts, op=op, seed=seed, scenario_id=cfg.name)
    res.write_csv(out)
    if res.aborted:
        click.echo(f"aborted at t={res.meta['abort_time']:g} s: {res.meta['abort_reason']}",
                   err=True)
        sys.exit(EXIT_ABORTED)


# --- analyze ---------------------------------------------------------------

def _read_series(path):
    """Time column plus named data columns from a CSV with a header row."""
    data = np.genfromtxt(path, delimiter=",", names=True, dtype=float)
    names = data.dtype.names
    if data.size < 2 or len(names) < 2:
        _fatal(f"{path}: need a time column and at least one data column with two rows")
    t = np.atleast_1d(data[names[0]])
    dt = float(np.median(np.diff(t)))
    if not np.allclose(np.diff(t), dt, rtol=1e-6, atol=1e-12):
        _fatal(f"{path}: samples are not uniformly spaced")
    return t, dt, {n: np.atleast_1d(data[n]) for n in names[1:]}


def _trim(t, series, discard_s):
    keep = t >= t[0] + discard_s - 1e-9
    if keep.sum() < 16:
        keep = np.ones_like(t, dtype=bool)
    return {k: v[keep] for k, v in series.items()}


def _emit(text: str, out):
    if out:
        Path(out).write_text(text)
    else:
        click.echo(text, nl=False)


_analyze_opts = [
    click.option("--input", "input_path", type=click.Path(exists=True, dir_okay=False),
                 required=True),
    click.option("--out", type=click.Path(dir_okay=False), help="Write here instead of stdout."),
]


def _with(opts):
    def deco(f):
        for o in reversed(opts):
            f = o(f)
        return f
    return deco


_signal_opts = _analyze_opts + [
    click.option("--column", help="Data column (default: the first)."),
    click.option("--discard-s", type=float, default=5.0, show_default=True,
                 help="Leading seconds dropped as start-up transient."),
]


def _column(series, column):
    if column is None:
        return next(iter(series.values()))
    if column not in series:
        _fatal(f"no column {column!r}; have {sorted(series)}")
    return series[column]


@main.group("analyze")
def analyze_group():
    """Modal analysis of signals and state matrices."""


@analyze_group.command("prony")
@_with(_signal_opts)
@click.option("--order", type=int, help="Model order (default min(20, N/10)).")
@click.option("--csv", "as_csv", is_flag=True, help="CSV mode table instead of JSON.")
def analyze_prony(input_path, out, column, discard_s, order, as_csv):
    """Fit damped sinusoids to one signal column."""
    t, dt, series = _read_series(input_path)
    x = _column(_trim(t, series, discard_s), column)
    try:
        modes = modal.prony_fit(x, dt, order)
    except modal.PronyError as exc:
        _fatal(f"{exc} (condition {exc.condition:.3g})")
    modes = modal.with_pseudo_energy(modes, x.size * dt)
    if as_csv:
        if not out:
            _fatal("--csv needs --out")
        modal.modes_to_csv(modes, out)
    else:
        _emit(modal.modes_to_json(modes) + "\n", out)


@analyze_group.command("fft")
@_with(_signal_opts)
@click.option("--window", type=click.Choice(modal.WINDOWS), default="rectangular",
              show_default=True)
def analyze_fft(input_path, out, column, discard_s, window):
    """Single-sided amplitude spectrum of one signal column, as CSV."""
    t, dt, series = _read_series(input_path)
    spec = modal.fft_spectrum(_column(_trim(t, series, discard_s), column), dt, window)
    lines = ["freq_hz,amplitude"] + [f"{float(f)!r},{float(a)!r}"
                                     for f, a in zip(spec.freq_hz, spec.amplitude)]
    _emit("\n".join(lines) + "\n", out)


@analyze_group.command("eig")
@_with(_analyze_opts)
def analyze_eig(input_path, out):
    """Oscillatory modes of a grid (.json) or a state matrix (CSV, no header)."""
    path = Path(input_path)
    if path.suffix.lower() == ".json":
        try:
            grid = netmodel.load_grid(path)
            a = modal.linearize(grid, netmodel.solve_power_flow(grid))
        except (netmodel.GridError, netmodel.PowerFlowError, np.linalg.LinAlgError) as exc:
            _fatal(str(exc))
    else:
        a = np.atleast_2d(np.loadtxt(path, delimiter=","))
    try:
        modes = modal.eigen_modes(a)
    except ValueError as exc:
        _fatal(str(exc))
    _emit(modal.modes_to_json(modes) + "\n", out)


@analyze_group.command("modeshape")
@_with(_signal_opts)
@click.option("--target-hz", type=float, required=True)
@click.option("--tolerance-hz", type=float, default=modal.DEFAULT_MODE_TOL_HZ, show_default=True)
@click.option("--order", type=int)
def analyze_modeshape(input_path, out, column, discard_s, target_hz, tolerance_hz, order):
    """Amplitude and phase of one mode across all signal columns."""
    t, dt, series = _read_series(input_path)
    shape = modal.mode_shape(_trim(t, series, discard_s), dt, target_hz, tolerance_hz, order)
    doc = {"target_hz": target_hz, "reference": shape.reference,
           "excluded": list(shape.excluded),
           "entries": {k: {"amplitude": a, "phase_rad": ph}
                       for k, (a, ph) in shape.entries.items()}}
    _emit(json.dumps(doc, indent=1, sort_keys=True) + "\n", out)


# --- scenario --------------------------------------------------------------

@main.group("scenario")
def scenario_group():
    """Seeded experiment batches and factor sweeps."""


@scenario_group.command("run")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--parallel", type=click.IntRange(1), default=1, show_default=True)
def scenario_run(config_path, out, parallel):
    """Run every seed of a scenario and export the report."""
    try:
        cfg = scenario.parse_scenario(config_path)
        report = scenario.run_scenario(cfg, parallel)
    except scenario.ScenarioError as exc:
        _fatal(str(exc))
    scenario.export_report(report, out)
    sys.exit(scenario.exit_code([report]))


@scenario_group.command("sweep")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--factor", type=click.Choice(scenario.FACTORS),
              help="Defaults to the sweep declared in the config.")
@click.option("--levels", help="JSON list of levels.")
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--parallel", type=click.IntRange(1), default=1, show_default=True)
def scenario_sweep(config_path, factor, levels, out, parallel):
    """Repeat a scenario across levels of one factor with shared seeds."""
    try:
        cfg = scenario.parse_scenario(config_path)
        parsed = json.loads(levels) if levels else None
        if (factor is None) != (parsed is None):
            raise scenario.ScenarioError("--factor and --levels go together")
        if parsed is not None and not isinstance(parsed, list):
            raise scenario.ScenarioError("--levels must be a JSON list")
        reports = scenario.run_factor_sweep(cfg, factor, parsed, parallel)
    except (scenario.ScenarioError, json.JSONDecodeError) as exc:
        _fatal(str(exc))
    scenario.export_sweep(reports, out)
    sys.exit(scenario.exit_code(reports))


if __name__ == "__main__":
    main()
