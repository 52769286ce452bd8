"""Declarative, seeded experiment runs over datacenter-forced grids.

A scenario names a grid, where datacenters sit and how large they are, the
workload distributions and the analyses to run.  Each seed yields one
simulation; factor sweeps repeat a scenario across levels of one factor with
the same seeds so levels can be compared pairwise.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import jsonschema
import numpy as np

from dcosc import __version__
from dcosc import modal
from dcosc.dynsim import SimOptions, SimResult, simulate
from dcosc.netmodel import (DatacenterSpec, GridError, GridModel, OperatingPoint,
                            PowerFlowError, attach_datacenter, load_grid, scale_inertia,
                            solve_power_flow)
from dcosc.workload import (DEFAULT_SPLIT, FinetuneParams, TrainingParams, WorkloadConfigError,
                            aggregate_ai_load, derive_seed, mix_expected_mean, params_from_dict,
                            split_budget)

log = logging.getLogger(__name__)

ANALYSES = ("prony", "fft", "eig", "modeshape", "pseudo_energy", "peak_to_peak")
FACTORS = ("inertia", "penetration", "sizing", "band", "siting")
SIZING_RTOL = 0.02


class ScenarioError(ValueError):
    """Invalid scenario document or a level that cannot be realized."""


_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_RANGE = {"type": "array", "items": _POS, "minItems": 2, "maxItems": 2}
_SITE = {
    "type": "object",
    "additionalProperties": False,
    "required": ["bus", "capacity_mw"],
    "properties": {"bus": {"type": "integer"}, "capacity_mw": {"type": "number", "minimum": 0},
                   "steady_fraction": _NUM, "fluct_fraction": _NUM},
}
_SIZING = {
    "type": "object",
    "additionalProperties": False,
    "required": ["count", "capacity_mw"],
    "properties": {"count": {"type": "integer", "minimum": 1}, "capacity_mw": _POS,
                   "total_mw": _POS},
}

SCENARIO_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["grid"],
    "properties": {
        "name": {"type": "string"},
        "grid": {"type": "string"},
        "datacenters": {"type": "array", "items": _SITE},
        "inertia_factor": _POS,
        "penetration_multiplier": _POS,
        "f0_range": _RANGE,
        "sizing": _SIZING,
        "siting": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
        "fluct_fraction": {"type": "number", "minimum": 0, "maximum": 1},
        "horizon": _POS,
        "dt": _POS,
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0,
                                             "maximum": 2 ** 64 - 1}, "minItems": 1},
        "analyses": {"type": "array", "items": {"enum": list(ANALYSES)}, "uniqueItems": True},
        "workload": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"training": {"type": "object"}, "finetune": {"type": "object"},
                           "n_small_training": {"type": "integer", "minimum": 0},
                           "n_finetune": {"type": "integer", "minimum": 0},
                           "ratio": {"type": "array", "items": _NUM, "minItems": 3,
                                     "maxItems": 3}},
        },
        "simulation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"integrator": {"enum": ["rk4", "trapezoidal"]}, "tol": _POS,
                           "voltage_floor": _NUM, "max_network_iter": {"type": "integer"}},
        },
        "analysis": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"discard_s": {"type": "number", "minimum": 0},
                           "prony_order": {"type": "integer", "minimum": 1},
                           "window": {"enum": list(modal.WINDOWS)},
                           "band_hz": _RANGE, "target_hz": _POS, "mode_tol_hz": _POS},
        },
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "required": ["factor", "levels"],
            "properties": {"factor": {"enum": list(FACTORS)},
                           "levels": {"type": "array", "minItems": 1}},
        },
    },
}


@dataclass(frozen=True)
class SiteSpec:
    bus: int
    capacity_mw: float
    steady_fraction: float = 0.8
    fluct_fraction: float = 0.2


@dataclass(frozen=True)
class SizingPlan:
    """``count`` datacenters of ``capacity_mw`` each, placed on the siting list in order."""

    count: int
    capacity_mw: float
    total_mw: float | None = None

    def check(self, total_mw: float | None = None):
        total = self.total_mw if total_mw is None else total_mw
        if total is None:
            return
        planned = self.count * self.capacity_mw
        if abs(planned - total) > SIZING_RTOL * total:
            raise ScenarioError(f"sizing {self.count} x {self.capacity_mw} MW = {planned:g} MW "
                                f"does not match the declared {total:g} MW")


@dataclass(frozen=True)
class AnalysisOptions:
    """How forced responses are analyzed.

    ``band_hz`` bounds the modes considered electromechanical when picking a
    dominant mode; ``target_hz`` (default: the lowest eigenmode) is the mode
    whose FFT amplitude and shape are reported.
    """

    discard_s: float = 5.0
    prony_order: int | None = None
    window: str = "hann"
    band_hz: tuple[float, float] = (0.1, 5.0)
    target_hz: float | None = None
    mode_tol_hz: float = modal.DEFAULT_MODE_TOL_HZ


@dataclass(frozen=True)
class ScenarioConfig:
    grid: str
    datacenters: tuple[SiteSpec, ...] = ()
    inertia_factor: float = 1.0
    penetration_multiplier: float = 1.0
    f0_range: tuple[float, float] | None = None
    sizing: SizingPlan | None = None
    siting: tuple[int, ...] | None = None
    fluct_fraction: float = 0.2
    horizon: float = 60.0
    dt: float = 0.01
    seeds: tuple[int, ...] = (0,)
    analyses: tuple[str, ...] = ANALYSES
    training: TrainingParams = TrainingParams()
    finetune: FinetuneParams = FinetuneParams()
    n_small_training: int = 2
    n_finetune: int = 2
    ratio: tuple[float, float, float] = DEFAULT_SPLIT
    sim: SimOptions = SimOptions()
    analysis: AnalysisOptions = AnalysisOptions()
    sweep: tuple[str, tuple] | None = None
    name: str = "scenario"
    # Where relative grid paths resolve from; not part of the semantics.
    base_dir: str | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.seeds:
            raise ScenarioError("at least one seed is required")
        if not self.penetration_multiplier > 0 or not self.inertia_factor > 0:
            raise ScenarioError("inertia factor and penetration multiplier must be positive")
        if self.sizing is not None and self.datacenters:
            raise ScenarioError("give either explicit datacenters or a sizing plan, not both")
        if self.sizing is not None:
            if not self.siting or len(self.siting) < self.sizing.count:
                raise ScenarioError(f"sizing needs {self.sizing.count} siting buses")
            self.sizing.check()
        if self.f0_range is not None and not 0 < self.f0_range[0] <= self.f0_range[1]:
            raise ScenarioError(f"invalid f0 range {self.f0_range}")
        unknown = set(self.analyses) - set(ANALYSES)
        if unknown:
            raise ScenarioError(f"unknown analyses {sorted(unknown)}")

    def to_dict(self) -> dict:
        """Semantic content as plain JSON types (the basis of the config hash)."""
        d = {
            "name": self.name, "grid": self.grid,
            "datacenters": [asdict(s) for s in self.datacenters],
            "inertia_factor": self.inertia_factor,
            "penetration_multiplier": self.penetration_multiplier,
            "f0_range": list(self.f0_range) if self.f0_range else None,
            "sizing": asdict(self.sizing) if self.sizing else None,
            "siting": list(self.siting) if self.siting else None,
            "fluct_fraction": self.fluct_fraction,
            "horizon": self.horizon, "dt": self.dt, "seeds": list(self.seeds),
            "analyses": sorted(self.analyses),
            "training": asdict(self.training), "finetune": asdict(self.finetune),
            "n_small_training": self.n_small_training, "n_finetune": self.n_finetune,
            "ratio": list(self.ratio),
            "simulation": {k: v for k, v in asdict(self.sim).items()
                           if k not in ("dt", "horizon")},
            "analysis": {**asdict(self.analysis), "band_hz": list(self.analysis.band_hz)},
            "sweep": {"factor": self.sweep[0], "levels": list(self.sweep[1])}
            if self.sweep else None,
        }
        return d

    def total_capacity_mw(self) -> float:
        if self.sizing is not None:
            return self.sizing.total_mw or self.sizing.count * self.sizing.capacity_mw
        return sum(s.capacity_mw for s in self.datacenters)


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(cfg: ScenarioConfig) -> str:
    return hashlib.sha256(_canonical(cfg.to_dict()).encode()).hexdigest()


def parse_scenario(document, base_dir=None) -> ScenarioConfig:
    """Validate a scenario document (dict, JSON text or file path) and apply defaults."""
    if isinstance(document, (str, Path)) and not str(document).lstrip().startswith("{"):
        path = Path(document)
        base_dir = base_dir or str(path.resolve().parent)
        document = json.loads(path.read_text())
    elif isinstance(document, str):
        document = json.loads(document)
    try:
        jsonschema.validate(document, SCENARIO_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ScenarioError(f"invalid scenario: {exc.message}") from None
    doc = document
    wl = doc.get("workload", {})
    an = doc.get("analysis", {})
    try:
        training = params_from_dict(wl.get("training", {}), "training")
        finetune = params_from_dict(wl.get("finetune", {}), "finetune")
        sim = SimOptions(dt=doc.get("dt", 0.01), horizon=doc.get("horizon", 60.0),
                         **doc.get("simulation", {}))
    except (WorkloadConfigError, ValueError, TypeError) as exc:
        raise ScenarioError(str(exc)) from None
    sweep = None
    if "sweep" in doc:
        sweep = (doc["sweep"]["factor"], tuple(_freeze(v) for v in doc["sweep"]["levels"]))
    cfg = ScenarioConfig(
        name=doc.get("name", "scenario"),
        grid=doc["grid"],
        datacenters=tuple(SiteSpec(**s) for s in doc.get("datacenters", [])),
        inertia_factor=doc.get("inertia_factor", 1.0),
        penetration_multiplier=doc.get("penetration_multiplier", 1.0),
        f0_range=tuple(doc["f0_range"]) if "f0_range" in doc else None,
        sizing=SizingPlan(**doc["sizing"]) if "sizing" in doc else None,
        siting=tuple(doc["siting"]) if "siting" in doc else None,
        fluct_fraction=doc.get("fluct_fraction", 0.2),
        horizon=sim.horizon, dt=sim.dt,
        seeds=tuple(doc.get("seeds", [0])),
        analyses=tuple(doc.get("analyses", ANALYSES)),
        training=training, finetune=finetune,
        n_small_training=wl.get("n_small_training", 2), n_finetune=wl.get("n_finetune", 2),
        ratio=tuple(wl.get("ratio", DEFAULT_SPLIT)),
        sim=sim,
        analysis=AnalysisOptions(**{k: tuple(v) if k == "band_hz" else v for k, v in an.items()}),
        sweep=sweep,
        base_dir=str(base_dir) if base_dir else None,
    )
    if not cfg.datacenters and cfg.sizing is None:
        raise ScenarioError("scenario needs datacenters or a sizing plan")
    if sweep:
        for level in sweep[1]:
            apply_level(cfg, sweep[0], level)
    return cfg


def _freeze(v):
    if isinstance(v, list):
        return tuple(_freeze(x) for x in v)
    if isinstance(v, dict):
        return tuple(sorted((k, _freeze(x)) for k, x in v.items()))
    return v


def _thaw(v):
    if isinstance(v, tuple) and v and all(isinstance(x, tuple) and len(x) == 2
                                          and isinstance(x[0], str) for x in v):
        return {k: _thaw(x) for k, x in v}
    if isinstance(v, tuple):
        return [_thaw(x) for x in v]
    return v


def apply_level(cfg: ScenarioConfig, factor: str, level) -> ScenarioConfig:
    """The configuration for one level of a factor sweep.

    Levels per factor: inertia and penetration take a number (a multiplier;
    penetration also accepts ``{"total_mw": X}``), band takes ``[lo, hi]`` Hz
    for the dominant job, sizing takes ``{"count", "capacity_mw"}`` with the
    same total as the base, siting takes a bus list sharing the base total
    equally.
    """
    level = _thaw(level)
    try:
        if factor == "inertia":
            return replace(cfg, inertia_factor=float(level), sweep=None)
        if factor == "penetration":
            if isinstance(level, dict):
                if set(level) != {"total_mw"}:
                    raise ScenarioError("penetration level must be a number or {total_mw}")
                level = float(level["total_mw"]) / cfg.total_capacity_mw()
            return replace(cfg, penetration_multiplier=float(level), sweep=None)
        if factor == "band":
            lo, hi = (float(x) for x in level)
            return replace(cfg, f0_range=(lo, hi), sweep=None)
        if factor == "sizing":
            plan = SizingPlan(**level)
            plan.check(cfg.total_capacity_mw())
            siting = cfg.siting or tuple(s.bus for s in cfg.datacenters)
            fraction = cfg.datacenters[0].fluct_fraction if cfg.datacenters else cfg.fluct_fraction
            return replace(cfg, datacenters=(), sizing=replace(plan, total_mw=None),
                           siting=tuple(siting), fluct_fraction=fraction, sweep=None)
        if factor == "siting":
            buses = tuple(int(b) for b in level)
            if not buses or len(set(buses)) != len(buses):
                raise ScenarioError(f"siting level needs distinct buses, got {level}")
            fraction = cfg.datacenters[0].fluct_fraction if cfg.datacenters else cfg.fluct_fraction
            share = cfg.total_capacity_mw() / len(buses)
            sites = tuple(SiteSpec(b, share, 1.0 - fraction, fraction) for b in buses)
            return replace(cfg, datacenters=sites, sizing=None, siting=None, sweep=None)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(f"invalid {factor} level {level!r}: {exc}") from None
    raise ScenarioError(f"unknown factor {factor!r}; choose from {FACTORS}")


def resolve_sites(cfg: ScenarioConfig) -> list[SiteSpec]:
    """Concrete datacenters after sizing and the penetration multiplier."""
    if cfg.sizing is not None:
        f = cfg.fluct_fraction
        sites = [SiteSpec(b, cfg.sizing.capacity_mw, 1.0 - f, f)
                 for b in cfg.siting[:cfg.sizing.count]]
    else:
        sites = list(cfg.datacenters)
    buses = [s.bus for s in sites]
    if len(set(buses)) != len(buses):
        raise ScenarioError(f"more than one datacenter per bus: {buses}")
    m = cfg.penetration_multiplier
    return [replace(s, capacity_mw=s.capacity_mw * m) for s in sites]


# --- running ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SeedEntry:
    """Outcome of one seed.  Analysis fields are None when not requested or aborted."""

    seed: int
    result: SimResult
    aborted: bool
    abort_reason: str | None
    peak_to_peak_hz: dict | None = None  # gen bus -> Hz
    dominant_gen: int | None = None
    spectrum: modal.Spectrum | None = None
    fft_peak: tuple[float, float] | None = None  # (Hz, amplitude) in the band
    mode_fft_amplitude: float | None = None  # FFT amplitude near the reference mode
    prony_modes: tuple | None = None  # modes of the dominant generator's frequency
    dominant_mode: modal.ModeEstimate | None = None
    mode_energy: dict | None = None  # reference-mode index -> summed pseudo energy
    mode_shape: modal.ModeShape | None = None

    @property
    def max_peak_to_peak(self) -> float | None:
        return max(self.peak_to_peak_hz.values()) if self.peak_to_peak_hz else None

    def summary(self) -> dict:
        d = {"seed": self.seed, "aborted": self.aborted, "abort_reason": self.abort_reason}
        if self.peak_to_peak_hz is not None:
            d["peak_to_peak_hz"] = {str(k): v for k, v in self.peak_to_peak_hz.items()}
            d["max_peak_to_peak_hz"] = self.max_peak_to_peak
        if self.dominant_gen is not None:
            d["dominant_gen"] = self.dominant_gen
        if self.fft_peak is not None:
            d["fft_peak_hz"], d["fft_peak_amplitude"] = self.fft_peak
            d["mode_fft_amplitude"] = self.mode_fft_amplitude
        if self.dominant_mode is not None:
            d["dominant_mode"] = self.dominant_mode.to_dict()
        if self.mode_energy is not None:
            d["mode_energy"] = {str(k): v for k, v in self.mode_energy.items()}
        return d


@dataclass(frozen=True, eq=False)
class ScenarioReport:
    config: ScenarioConfig
    entries: tuple[SeedEntry, ...]
    eigen_modes: tuple[modal.ModeEstimate, ...]
    reference_hz: float | None
    provenance: dict
    level: object = None
    error: str | None = None

    @property
    def any_aborted(self) -> bool:
        return any(e.aborted for e in self.entries)

    def aggregates(self) -> dict:
        """Statistics recomputed from the entries."""
        ok = [e for e in self.entries if not e.aborted]
        agg = {"seeds": len(self.entries), "aborted": len(self.entries) - len(ok),
               "reference_hz": self.reference_hz}
        ptp = [e.max_peak_to_peak for e in ok if e.peak_to_peak_hz is not None]
        if ptp:
            agg["max_peak_to_peak_hz"] = {"mean": float(np.mean(ptp)), "max": float(np.max(ptp)),
                                          "min": float(np.min(ptp))}
        dom = [e.dominant_mode.frequency_hz for e in ok if e.dominant_mode is not None]
        if dom:
            agg["dominant_frequency_hz"] = {"median": float(np.median(dom)),
                                            "per_seed": dom}
        amps = [e.mode_fft_amplitude for e in ok if e.mode_fft_amplitude is not None]
        if amps:
            agg["mode_fft_amplitude_mean"] = float(np.mean(amps))
        energies = [e.mode_energy for e in ok if e.mode_energy is not None]
        if energies and self.eigen_modes:
            total = {k: float(sum(en.get(k, 0.0) for en in energies))
                     for k in range(len(self.eigen_modes))}
            top = max(total.values())
            agg["pseudo_energy_ranking"] = [
                {"mode_hz": self.eigen_modes[k].frequency_hz, "energy": total[k],
                 "normalized": total[k] / top if top > 0 else 0.0}
                for k in sorted(total, key=lambda k: (-total[k], k))]
        return agg


def _analysis_window(res: SimResult, discard_s: float) -> np.ndarray:
    mask = res.time >= discard_s - 1e-9
    if mask.sum() < 16:
        # Too short to discard anything useful; analyze the whole run.
        mask = np.ones_like(res.time, dtype=bool)
    return mask


def _dominant(modes, band, duration):
    inband = [m for m in modes if band[0] <= m.frequency_hz <= band[1]]
    if not inband:
        return None
    return max(inband, key=lambda m: modal.pseudo_energy(m, duration))


def _analyze(cfg: ScenarioConfig, res: SimResult, eig, ref_hz) -> dict:
    an = cfg.analysis
    todo = set(cfg.analyses)
    mask = _analysis_window(res, an.discard_s)
    df = res.freq_deviation()[mask]
    duration = df.shape[0] * res.dt
    gens = res.gen_buses
    out: dict = {}
    ptp = np.ptp(df, axis=0)
    j = int(np.argmax(ptp))
    out["dominant_gen"] = gens[j]
    if "peak_to_peak" in todo:
        out["peak_to_peak_hz"] = {b: float(v) for b, v in zip(gens, ptp)}
    x = df[:, j]
    if "fft" in todo:
        spec = modal.fft_spectrum(x, res.dt, an.window)
        out["spectrum"] = spec
        out["fft_peak"] = spec.dominant(*an.band_hz)
        if ref_hz is not None:
            out["mode_fft_amplitude"] = spec.dominant(ref_hz - an.mode_tol_hz,
                                                      ref_hz + an.mode_tol_hz)[1]
    if todo & {"prony", "pseudo_energy", "modeshape"}:
        fits = {}
        for k, b in enumerate(gens):
            try:
                fits[b] = modal.prony_fit(df[:, k], res.dt, an.prony_order)
            except modal.PronyError as exc:
                log.warning("prony failed on generator %s: %s", b, exc)
                fits[b] = []
        modes = modal.with_pseudo_energy(fits[gens[j]], duration)
        out["prony_modes"] = tuple(modes)
        out["dominant_mode"] = _dominant(modes, an.band_hz, duration)
        if "pseudo_energy" in todo and eig:
            energy = {k: 0.0 for k in range(len(eig))}
            for b in gens:
                for m in fits[b]:
                    dist = [abs(m.frequency_hz - e.frequency_hz) for e in eig]
                    k = int(np.argmin(dist))
                    if dist[k] <= an.mode_tol_hz:
                        energy[k] += modal.pseudo_energy(m, duration)
            out["mode_energy"] = energy
        if "modeshape" in todo:
            target = ref_hz if ref_hz is not None else (
                out["dominant_mode"].frequency_hz if out["dominant_mode"] else None)
            if target is not None:
                out["mode_shape"] = modal.mode_shape(
                    {b: df[:, k] for k, b in enumerate(gens)}, res.dt, target,
                    an.mode_tol_hz, an.prony_order)
    if "prony" not in todo:
        out.pop("prony_modes", None)
    return out


def prepare_grid(cfg: ScenarioConfig):
    """Grid with datacenters attached and inertia scaled, its operating point, and sites."""
    try:
        base = load_grid(_grid_ref(cfg))
        sites = resolve_sites(cfg)
        grid = base
        for s in sites:
            grid = attach_datacenter(grid, DatacenterSpec(s.bus, s.capacity_mw,
                                                          s.steady_fraction, s.fluct_fraction))
        grid = scale_inertia(grid, cfg.inertia_factor)
        op = solve_power_flow(grid)
    except (GridError, PowerFlowError, OSError) as exc:
        raise ScenarioError(f"cannot prepare grid: {exc}") from exc
    return grid, op, sites


def _grid_ref(cfg: ScenarioConfig):
    path = Path(cfg.grid)
    if cfg.base_dir and not path.is_absolute() and (Path(cfg.base_dir) / path).exists():
        return Path(cfg.base_dir) / path
    return cfg.grid


def unit_mix(cfg: ScenarioConfig):
    """Workload mix whose long-run mean is exactly 1 MW."""
    mix = split_budget(1.0, cfg.training, cfg.finetune, cfg.n_small_training, cfg.n_finetune,
                       cfg.ratio, cfg.f0_range)
    mean = mix_expected_mean(mix)
    if mean <= 0:
        raise ScenarioError("workload mix has zero expected power")
    return mix.scaled(1.0 / mean)


def site_traces(cfg: ScenarioConfig, sites: Sequence[SiteSpec], seed: int) -> dict:
    """Per-bus forcing traces; site ``i`` is drawn from ``derive_seed(seed, i)``.

    Each trace is a unit-mean draw scaled to the site's fluctuating share, so
    rescaling a site never redraws it.
    """
    mix = unit_mix(cfg)
    out = {}
    for i, s in enumerate(sites):
        unit = aggregate_ai_load(mix, cfg.horizon, cfg.dt, derive_seed(seed, i))
        out[s.bus] = unit.scaled(s.capacity_mw * s.fluct_fraction)
    return out


def _run_seed(cfg: ScenarioConfig, grid: GridModel, op: OperatingPoint, sites, seed: int,
              eig, ref_hz) -> SeedEntry:
    forcings = site_traces(cfg, sites, seed)
    opts = replace(cfg.sim, dt=cfg.dt, horizon=cfg.horizon)
    res = simulate(grid, forcings, opts, op=op, seed=seed, scenario_id=cfg.name)
    if res.aborted:
        log.warning("seed %d aborted: %s", seed, res.meta["abort_reason"])
        return SeedEntry(seed, res, True, res.meta["abort_reason"])
    return SeedEntry(seed, res, False, None, **_analyze(cfg, res, eig, ref_hz))


def _seed_task(args):
    cfg, seed = args
    grid, op, sites = prepare_grid(cfg)
    eig, ref = _reference(cfg, grid, op)
    return _run_seed(cfg, grid, op, sites, seed, eig, ref)


def _reference(cfg, grid, op):
    try:
        eig = tuple(modal.eigen_modes(modal.linearize(grid, op)))
    except np.linalg.LinAlgError as exc:
        log.warning("eigenanalysis failed: %s", exc)
        eig = ()
    ref = cfg.analysis.target_hz
    if ref is None and eig:
        ref = eig[0].frequency_hz
    return eig, ref


def run_scenario(cfg: ScenarioConfig, parallel: int = 1, level=None) -> ScenarioReport:
    """Simulate and analyze every seed of ``cfg``.

    Aborted seeds are recorded in their entry.  Grid loading or power-flow
    failures raise :class:`ScenarioError`.
    """
    grid, op, sites = prepare_grid(cfg)
    eig, ref = _reference(cfg, grid, op)
    if parallel > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            entries = list(pool.map(_seed_task, [(cfg, s) for s in cfg.seeds]))
    else:
        entries = [_run_seed(cfg, grid, op, sites, s, eig, ref) for s in cfg.seeds]
    provenance = {"config_hash": config_hash(cfg), "seeds": list(cfg.seeds),
                  "code_version": __version__, "grid": grid.name,
                  "sites": [asdict(s) for s in sites]}
    return ScenarioReport(cfg, tuple(entries), eig, ref, provenance, level)


def run_factor_sweep(cfg: ScenarioConfig, factor: str | None = None, levels=None,
                     parallel: int = 1) -> list[ScenarioReport]:
    """One report per level, all sharing ``cfg.seeds``.

    Defaults to the sweep declared in ``cfg``.  A level that cannot be
    realized yields a report with ``error`` set and no entries.
    """
    if factor is None:
        if cfg.sweep is None:
            raise ScenarioError("no sweep declared and none given")
        factor, levels = cfg.sweep
    if factor not in FACTORS:
        raise ScenarioError(f"unknown factor {factor!r}; choose from {FACTORS}")
    if not levels:
        raise ScenarioError("a sweep needs at least one level")
    reports = []
    for level in levels:
        label = _thaw(_freeze(level))
        try:
            level_cfg = apply_level(cfg, factor, _freeze(level))
            reports.append(run_scenario(level_cfg, parallel, level={"factor": factor,
                                                                    "value": label}))
        except ScenarioError as exc:
            log.error("level %r failed: %s", level, exc)
            reports.append(ScenarioReport(cfg, (), (), None,
                                          {"config_hash": config_hash(cfg),
                                           "seeds": list(cfg.seeds),
                                           "code_version": __version__},
                                          {"factor": factor, "value": label}, str(exc)))
    return reports


def comparison_table(reports: Sequence[ScenarioReport]) -> list[dict]:
    """One row per (level, seed) with the headline metrics, ordered by level then seed."""
    rows = []
    for i, rep in enumerate(reports):
        value = rep.level["value"] if rep.level else None
        if rep.error:
            rows.append({"level": i, "value": _canonical(value), "seed": None,
                         "aborted": None, "error": rep.error})
            continue
        for e in rep.entries:
            dom = e.dominant_mode
            rows.append({
                "level": i, "value": _canonical(value), "seed": e.seed, "aborted": e.aborted,
                "error": None,
                "max_peak_to_peak_hz": e.max_peak_to_peak,
                "dominant_gen": e.dominant_gen,
                "fft_peak_hz": e.fft_peak[0] if e.fft_peak else None,
                "fft_peak_amplitude": e.fft_peak[1] if e.fft_peak else None,
                "mode_fft_amplitude": e.mode_fft_amplitude,
                "dominant_mode_hz": dom.frequency_hz if dom else None,
                "dominant_mode_damping": dom.damping_ratio if dom else None,
            })
    return rows


# --- export ----------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write(path: Path, text: str, written: list, root: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    written.append(path.relative_to(root).as_posix())


def _json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=True) + "\n"


def _rows_csv(cols, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in cols])
    return buf.getvalue()


def _export_report(report: ScenarioReport, root: Path, sub: str, written: list):
    base = root / sub if sub else root
    todo = set(report.config.analyses)
    if report.error is None and todo:
        _write(base / "summary.json", _json({"provenance": report.provenance,
                                             "level": report.level,
                                             "aggregates": report.aggregates(),
                                             "entries": [e.summary() for e in report.entries]}),
               written, root)
    if "eig" in todo and report.eigen_modes:
        _write(base / "eigen_modes.json", modal.modes_to_json(report.eigen_modes) + "\n",
               written, root)
    if "peak_to_peak" in todo and report.entries:
        gens = report.entries[0].result.gen_buses
        rows = [{"seed": e.seed, **{f"gen_{b}": (e.peak_to_peak_hz or {}).get(b) for b in gens}}
                for e in report.entries]
        _write(base / "peak_to_peak.csv", _rows_csv(["seed"] + [f"gen_{b}" for b in gens], rows),
               written, root)
    for e in report.entries:
        d = base / f"seed_{e.seed}"
        for p in e.result.write_csv(d):
            written.append(p.relative_to(root).as_posix())
        if e.spectrum is not None:
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["freq_hz", "amplitude"])
            for f, a in zip(e.spectrum.freq_hz, e.spectrum.amplitude):
                w.writerow([repr(float(f)), repr(float(a))])
            _write(d / "spectrum.csv", buf.getvalue(), written, root)
        if e.prony_modes is not None:
            _write(d / "prony_modes.json", modal.modes_to_json(e.prony_modes) + "\n",
                   written, root)
            _write(d / "prony_scatter.csv",
                   _rows_csv(["frequency_hz", "damping_ratio", "amplitude"],
                             [m.to_dict() for m in e.prony_modes]), written, root)
        if e.mode_shape is not None:
            shape = e.mode_shape
            doc = {"target_hz": shape.target_hz, "reference_gen": shape.reference,
                   "excluded": list(shape.excluded),
                   "entries": {str(k): {"amplitude": a, "phase_rad": ph}
                               for k, (a, ph) in shape.entries.items()}}
            _write(d / "mode_shape.json", _json(doc), written, root)


def _manifest(root: Path, written: list, extra: dict):
    files = []
    for rel in sorted(written):
        digest = hashlib.sha256((root / rel).read_bytes()).hexdigest()
        files.append({"path": rel, "sha256": digest})
    path = root / "manifest.json"
    path.write_text(_json({**extra, "files": files}))
    return path


def export_report(report: ScenarioReport, out_dir) -> list[Path]:
    """Write time series, requested analysis artifacts and a manifest.

    Output is a pure function of the report, so re-exporting gives
    byte-identical files.  Returns the paths written, manifest last.
    """
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    written: list[str] = []
    _export_report(report, root, "", written)
    manifest = _manifest(root, written, {"provenance": report.provenance})
    return [root / p for p in sorted(written)] + [manifest]


def export_sweep(reports: Sequence[ScenarioReport], out_dir) -> list[Path]:
    """Per-level report directories plus the cross-level comparison table."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    written: list[str] = []
    for i, rep in enumerate(reports):
        _export_report(rep, root, f"level_{i}", written)
    rows = comparison_table(reports)
    cols = ["level", "value", "seed", "aborted", "error", "max_peak_to_peak_hz",
            "dominant_gen", "fft_peak_hz", "fft_peak_amplitude", "mode_fft_amplitude",
            "dominant_mode_hz", "dominant_mode_damping"]
    _write(root / "comparison.csv", _rows_csv(cols, rows), written, root)
    levels = [{"level": i, "value": rep.level["value"] if rep.level else None,
               "error": rep.error, "config_hash": rep.provenance.get("config_hash")}
              for i, rep in enumerate(reports)]
    extra = {"levels": levels,
             "factor": reports[0].level["factor"] if reports and reports[0].level else None}
    manifest = _manifest(root, written, extra)
    return [root / p for p in sorted(written)] + [manifest]


def exit_code(reports: Sequence[ScenarioReport]) -> int:
    """0 on full success, 2 if any seed aborted or a level failed."""
    return 2 if any(r.any_aborted or r.error for r in reports) else 0
