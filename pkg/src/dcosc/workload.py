"""Stochastic power profiles for AI training and fine-tuning workloads.

Each workload alternates between a high-power compute phase and a low-power
communication phase.  Cycle durations jitter around a baseline frequency drawn
once per workload, phase levels shift per iteration, and every output sample
carries white intra-phase noise.  A datacenter's fluctuating demand is the
superposition of one dominant training job with smaller training and
fine-tuning jobs.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

# Cycle-jitter draws at or below this are rejected (1 + xi must stay positive).
MIN_RATE_FACTOR = 0.1
DEFAULT_SPLIT = (9.0, 0.5, 0.5)


class WorkloadConfigError(ValueError):
    """Invalid workload parameters or sampling configuration."""


def _check_common(f_lo, f_hi, r_lo, r_hi, sigmas, mu, p_hat):
    if not 0 < f_lo <= f_hi:
        raise WorkloadConfigError(f"need 0 < f_min <= f_max, got {f_lo}, {f_hi}")
    if not 0 < r_lo <= r_hi < 1:
        raise WorkloadConfigError(f"need 0 < r_min <= r_max < 1, got {r_lo}, {r_hi}")
    if any(s < 0 for s in sigmas):
        raise WorkloadConfigError("standard deviations must be non-negative")
    if not 0 <= mu < 1:
        raise WorkloadConfigError(f"mean low-phase depression must lie in [0, 1), got {mu}")
    if p_hat < 0:
        raise WorkloadConfigError(f"nominal power must be non-negative, got {p_hat}")


@dataclass(frozen=True)
class TrainingParams:
    """Distribution parameters of one training workload.

    Defaults are the example values for large-scale training; where only a
    range is available for the intra-phase noise, the midpoint is used.
    ``p_hat`` is the nominal up-phase power in MW.
    """

    f0_min: float = 0.5
    f0_max: float = 1.5
    sigma_xi: float = 0.1
    r_min: float = 0.55
    r_max: float = 0.8
    sigma_delta: float = 0.05
    mu_delta: float = 0.3
    sigma_eta_up: float = 0.035
    sigma_eta_down: float = 0.02
    p_hat: float = 1.0

    def __post_init__(self):
        _check_common(self.f0_min, self.f0_max, self.r_min, self.r_max,
                      (self.sigma_xi, self.sigma_delta, self.sigma_eta_up, self.sigma_eta_down),
                      self.mu_delta, self.p_hat)

    def _model(self) -> "_PhaseModel":
        return _PhaseModel(self.f0_min, self.f0_max, self.sigma_xi, self.r_min, self.r_max,
                           self.sigma_delta, self.mu_delta, self.sigma_eta_up,
                           self.sigma_eta_down, self.p_hat)


@dataclass(frozen=True)
class FinetuneParams:
    """Distribution parameters of one fine-tuning workload (tail/idle phases)."""

    f1_min: float = 0.3
    f1_max: float = 0.7
    sigma_zeta: float = 0.1
    r_min: float = 0.7
    r_max: float = 0.9
    sigma_delta_ft: float = 0.03
    mu_delta_ft: float = 0.8
    sigma_eta_tail: float = 0.02
    sigma_eta_idle: float = 0.0125
    p_hat: float = 1.0

    def __post_init__(self):
        _check_common(self.f1_min, self.f1_max, self.r_min, self.r_max,
                      (self.sigma_zeta, self.sigma_delta_ft, self.sigma_eta_tail,
                       self.sigma_eta_idle),
                      self.mu_delta_ft, self.p_hat)

    def _model(self) -> "_PhaseModel":
        return _PhaseModel(self.f1_min, self.f1_max, self.sigma_zeta, self.r_min, self.r_max,
                           self.sigma_delta_ft, self.mu_delta_ft, self.sigma_eta_tail,
                           self.sigma_eta_idle, self.p_hat)


@dataclass(frozen=True)
class _PhaseModel:
    # Shared two-phase structure behind both workload kinds.
    f_min: float
    f_max: float
    sigma_rate: float
    r_min: float
    r_max: float
    sigma_shift: float
    mu_shift: float
    sigma_eta_high: float
    sigma_eta_low: float
    p_hat: float


@dataclass(frozen=True)
class CycleRealization:
    """One realized iteration.

    ``high_shift`` is added to the nominal level during the high phase and
    ``low_shift`` is subtracted during the low phase, so the phase levels are
    ``p_hat * (1 + high_shift)`` and ``p_hat * (1 - low_shift)``.
    """

    start_time: float
    cycle_duration: float
    high_duration: float
    low_duration: float
    rate_draw: float
    duty: float
    high_shift: float
    low_shift: float


@dataclass(frozen=True, eq=False)
class PowerTrace:
    """Uniformly sampled real power demand in MW."""

    dt: float
    values: np.ndarray
    t0: float = 0.0
    seed: int | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if not self.dt > 0:
            raise WorkloadConfigError(f"dt must be positive, got {self.dt}")
        if values.ndim != 1 or values.size == 0:
            raise WorkloadConfigError("trace values must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(values)):
            raise WorkloadConfigError("trace values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.size

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.values.size)

    @property
    def duration(self) -> float:
        """Length of the zero-order-hold signal the samples represent."""
        return self.dt * self.values.size

    def scaled(self, factor: float) -> "PowerTrace":
        return replace(self, values=self.values * factor, meta=dict(self.meta))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["time_s", "power_mw"])
            for t, p in zip(self.times, self.values):
                writer.writerow([repr(float(t)), repr(float(p))])

    @classmethod
    def from_csv(cls, path, seed: int | None = None) -> "PowerTrace":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if [h.strip() for h in header] != ["time_s", "power_mw"]:
                raise WorkloadConfigError(f"unexpected CSV header {header!r}")
            rows = [(float(a), float(b)) for a, b in reader]
        if len(rows) < 2:
            raise WorkloadConfigError("a CSV trace needs at least two rows to infer dt")
        t = np.array([r[0] for r in rows])
        steps = np.diff(t)
        dt = float(np.mean(steps))
        if np.max(np.abs(steps - dt)) > 1e-9 * max(1.0, abs(dt)):
            raise WorkloadConfigError("CSV trace is not uniformly sampled")
        return cls(dt=dt, t0=float(t[0]), values=np.array([r[1] for r in rows]), seed=seed)

    def to_json(self) -> str:
        doc = {"dt": self.dt, "t0": self.t0, "seed": self.seed, "meta": self.meta,
               "values": [float(v) for v in self.values]}
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PowerTrace":
        doc = json.loads(text)
        return cls(dt=float(doc["dt"]), t0=float(doc.get("t0", 0.0)),
                   values=np.asarray(doc["values"], dtype=float), seed=doc.get("seed"),
                   meta=doc.get("meta", {}))


@dataclass(frozen=True)
class WorkloadMix:
    """Dominant training job plus pools of small training and fine-tuning jobs."""

    dominant: TrainingParams | None = None
    small_training: tuple[TrainingParams, ...] = ()
    finetune: tuple[FinetuneParams, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "small_training", tuple(self.small_training))
        object.__setattr__(self, "finetune", tuple(self.finetune))

    def members(self) -> list[TrainingParams | FinetuneParams]:
        head = [self.dominant] if self.dominant is not None else []
        return head + list(self.small_training) + list(self.finetune)

    @property
    def nominal_mw(self) -> float:
        """Sum of nominal high-phase powers."""
        return float(sum(m.p_hat for m in self.members()))

    def scaled(self, factor: float) -> "WorkloadMix":
        return WorkloadMix(
            dominant=None if self.dominant is None
            else replace(self.dominant, p_hat=self.dominant.p_hat * factor),
            small_training=[replace(p, p_hat=p.p_hat * factor) for p in self.small_training],
            finetune=[replace(p, p_hat=p.p_hat * factor) for p in self.finetune],
        )


def derive_seed(seed: int, *keys: int) -> int:
    """Counter-based 64-bit sub-seed, stable across processes and platforms."""
    payload = struct.pack(f"<{1 + len(keys)}Q", *((int(k) & (2**64 - 1)) for k in (seed, *keys)))
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def expected_mean_factor(params: TrainingParams | FinetuneParams) -> float:
    """Long-run mean power divided by ``p_hat``.

    The fraction of time spent in the high phase is ``E[r]`` because the duty
    draw is independent of the cycle length; noise and high-phase shifts are
    zero-mean.
    """
    m = params._model()
    r_mean = 0.5 * (m.r_min + m.r_max)
    return 1.0 - (1.0 - r_mean) * m.mu_shift


def _check_grid(m: _PhaseModel, horizon: float, dt: float):
    if not horizon > 0 or not dt > 0:
        raise WorkloadConfigError(f"horizon and dt must be positive, got {horizon}, {dt}")
    if horizon < 1.0 / m.f_max:
        raise WorkloadConfigError(
            f"horizon {horizon} s is shorter than one cycle at {m.f_max} Hz")
    coarsest = (1.0 - m.r_max) / m.f_max
    if dt > coarsest * (1 + 1e-12):
        raise WorkloadConfigError(
            f"dt {dt} s cannot resolve a {coarsest:.4g} s low phase")


def _draw_cycles(m: _PhaseModel, t_end: float, rng: np.random.Generator):
    f_base = rng.uniform(m.f_min, m.f_max)
    cycles = []
    t = 0.0
    while t <= t_end:
        draw = rng.normal(0.0, m.sigma_rate)
        while 1.0 + draw <= MIN_RATE_FACTOR:
            draw = rng.normal(0.0, m.sigma_rate)
        period = 1.0 / (f_base * (1.0 + draw))
        duty = rng.uniform(m.r_min, m.r_max)
        high_shift = rng.normal(0.0, m.sigma_shift)
        low_shift = rng.normal(m.mu_shift, m.sigma_shift)
        high = duty * period
        cycles.append(CycleRealization(t, period, high, period - high, draw, duty,
                                       high_shift, low_shift))
        t += period
    return f_base, cycles


def _render(m: _PhaseModel, cycles, n: int, dt: float, rng: np.random.Generator, noise: bool):
    level = np.empty(n)
    sigma = np.empty(n)
    phase_high = np.empty(n, dtype=bool)

    def index(t):
        # Snap a boundary down onto the sample grid; the tolerance absorbs
        # representation error such as 0.75 / 0.01 = 75.00000000000001.
        return min(n, max(0, math.floor(t / dt + 1e-9)))

    for c in cycles:
        a = index(c.start_time)
        b = index(c.start_time + c.high_duration)
        e = index(c.start_time + c.cycle_duration)
        level[a:b] = m.p_hat * (1.0 + c.high_shift)
        level[b:e] = m.p_hat * (1.0 - c.low_shift)
        sigma[a:b] = m.sigma_eta_high
        sigma[b:e] = m.sigma_eta_low
        phase_high[a:b] = True
        phase_high[b:e] = False
    values = level
    if noise:
        values = level + m.p_hat * sigma * rng.standard_normal(n)
    negative = values < 0
    clamped = int(np.count_nonzero(negative))
    if clamped:
        values = np.where(negative, 0.0, values)
    return values, phase_high, clamped


def _n_samples(horizon: float, dt: float) -> int:
    # Samples at k*dt for k*dt < horizon; each holds until the next sample.
    return max(1, int(math.ceil(horizon / dt - 1e-9)))


def _generate(params, kind: str, horizon: float, dt: float, seed: int, noise: bool = True):
    m = params._model()
    _check_grid(m, horizon, dt)
    rng = np.random.default_rng(seed)
    f_base, cycles = _draw_cycles(m, horizon + dt, rng)
    values, _, clamped = _render(m, cycles, _n_samples(horizon, dt), dt, rng, noise)
    meta = {"kind": kind, "base_frequency_hz": f_base, "cycles": len(cycles),
            "clamped": clamped}
    return PowerTrace(dt=dt, values=values, seed=seed, meta=meta)


def sample_cycles(params: TrainingParams | FinetuneParams, horizon: float, dt: float,
                  seed: int):
    """Return ``(base_frequency, cycles)`` exactly as drawn by the trace generators.

    The generators consume the random stream cycle draws first, so the cycles
    returned here are the ones underlying the trace produced with the same
    seed, horizon and dt.
    """
    m = params._model()
    _check_grid(m, horizon, dt)
    return _draw_cycles(m, horizon + dt, np.random.default_rng(seed))


def phase_mask(params: TrainingParams | FinetuneParams, horizon: float, dt: float,
               seed: int) -> np.ndarray:
    """Boolean mask of samples in the high phase, aligned with the generated trace."""
    m = params._model()
    _check_grid(m, horizon, dt)
    rng = np.random.default_rng(seed)
    _, cycles = _draw_cycles(m, horizon + dt, rng)
    return _render(m, cycles, _n_samples(horizon, dt), dt, rng, noise=False)[1]


def generate_training_trace(params: TrainingParams, horizon: float, dt: float,
                            seed: int, noise: bool = True) -> PowerTrace:
    """Sample a training power trace on ``[0, horizon)`` with spacing ``dt``.

    Args:
        params: Distribution parameters; ``p_hat`` sets the MW scale.
        horizon: Trace length in seconds.
        dt: Sample spacing in seconds.
        seed: Seed of the random stream; identical seeds give identical traces.
        noise: Set False to suppress the per-sample intra-phase noise.

    Returns:
        The trace. ``meta["clamped"]`` counts samples clipped at 0 MW.
    """
    return _generate(params, "training", horizon, dt, seed, noise)


def generate_finetune_trace(params: FinetuneParams, horizon: float, dt: float,
                            seed: int, noise: bool = True) -> PowerTrace:
    """Sample a fine-tuning power trace; same contract as the training generator."""
    return _generate(params, "finetune", horizon, dt, seed, noise)


def generate_trace(params: TrainingParams | FinetuneParams, horizon: float, dt: float,
                   seed: int, noise: bool = True) -> PowerTrace:
    if isinstance(params, TrainingParams):
        return generate_training_trace(params, horizon, dt, seed, noise)
    return generate_finetune_trace(params, horizon, dt, seed, noise)


def aggregate_ai_load(mix: WorkloadMix, horizon: float, dt: float, seed: int,
                      sub_seeds: Sequence[int] | None = None) -> PowerTrace:
    """Superpose the member workloads of ``mix`` on a common time grid.

    Member ``k`` (dominant first, then small training, then fine-tuning) is
    drawn with ``derive_seed(seed, k)`` unless ``sub_seeds`` is given.
    """
    members = mix.members()
    if sub_seeds is None:
        sub_seeds = [derive_seed(seed, k) for k in range(len(members))]
    elif len(sub_seeds) != len(members):
        raise WorkloadConfigError("need one sub-seed per workload")
    if not horizon > 0 or not dt > 0:
        raise WorkloadConfigError(f"horizon and dt must be positive, got {horizon}, {dt}")
    total = np.zeros(_n_samples(horizon, dt))
    clamped = 0
    for params, s in zip(members, sub_seeds):
        tr = generate_trace(params, horizon, dt, s)
        total += tr.values
        clamped += tr.meta["clamped"]
    meta = {"kind": "mix", "sub_seeds": [int(s) for s in sub_seeds], "clamped": clamped,
            "members": len(members)}
    return PowerTrace(dt=dt, values=total, seed=seed, meta=meta)


def split_budget(budget_mw: float, training: TrainingParams | None = None,
                 finetune: FinetuneParams | None = None, n_small_training: int = 2,
                 n_finetune: int = 2, ratio: Sequence[float] = DEFAULT_SPLIT,
                 dominant_f0: tuple[float, float] | None = None) -> WorkloadMix:
    """Divide a nominal fluctuating budget among dominant/small-training/fine-tuning jobs.

    Pools are shared evenly by their members.  ``dominant_f0`` overrides the
    baseline-frequency range of the dominant training job only.
    """
    if budget_mw < 0:
        raise WorkloadConfigError("budget must be non-negative")
    if n_small_training < 0 or n_finetune < 0:
        raise WorkloadConfigError("workload counts must be non-negative")
    if len(ratio) != 3 or any(x < 0 for x in ratio) or sum(ratio) <= 0:
        raise WorkloadConfigError(f"invalid split ratio {ratio!r}")
    training = training or TrainingParams()
    finetune = finetune or FinetuneParams()
    w_dom, w_tr, w_ft = (x / sum(ratio) for x in ratio)
    dominant = replace(training, p_hat=budget_mw * w_dom)
    if dominant_f0 is not None:
        dominant = replace(dominant, f0_min=dominant_f0[0], f0_max=dominant_f0[1])
    small = [replace(training, p_hat=budget_mw * w_tr / n_small_training)
             for _ in range(n_small_training)]
    fine = [replace(finetune, p_hat=budget_mw * w_ft / n_finetune) for _ in range(n_finetune)]
    return WorkloadMix(dominant=dominant, small_training=small, finetune=fine)


def mix_expected_mean(mix: WorkloadMix) -> float:
    """Long-run mean MW of the superposed mix."""
    return float(sum(p.p_hat * expected_mean_factor(p) for p in mix.members()))


@dataclass(frozen=True)
class TraceStats:
    mean: float
    std: float
    min: float
    max: float
    dominant_hz: float | None  # None when the trace has no non-DC content


def trace_stats(trace: PowerTrace) -> TraceStats:
    x = trace.values
    spec = np.abs(np.fft.rfft(x - x.mean()))
    freqs = np.fft.rfftfreq(x.size, trace.dt)
    dominant = None
    if spec.size > 1:
        k = 1 + int(np.argmax(spec[1:]))
        # Pure round-off in the FFT of a constant signal is not a tone.
        if spec[k] > 1e-9 * max(1.0, float(np.abs(x).max())) * x.size:
            dominant = float(freqs[k])
    return TraceStats(float(x.mean()), float(x.std()), float(x.min()), float(x.max()), dominant)


def params_from_dict(doc: dict, kind: str):
    cls = TrainingParams if kind == "training" else FinetuneParams
    unknown = set(doc) - set(cls.__dataclass_fields__)
    if unknown:
        raise WorkloadConfigError(f"unknown {kind} parameter(s): {sorted(unknown)}")
    return cls(**doc)


def mix_from_dict(doc: dict) -> WorkloadMix:
    """Build a mix from either explicit members or a budget to split.

    Explicit form: ``{"dominant": {...}, "small_training": [...], "finetune": [...]}``.
    Budget form: ``{"budget_mw": 200, "ratio": [9, 0.5, 0.5], "n_small_training": 2,
    "n_finetune": 2, "training": {...}, "finetune_params": {...}}``.
    """
    if "budget_mw" in doc:
        allowed = {"budget_mw", "ratio", "n_small_training", "n_finetune", "training",
                   "finetune_params", "dominant_f0"}
        unknown = set(doc) - allowed
        if unknown:
            raise WorkloadConfigError(f"unknown mix key(s): {sorted(unknown)}")
        return split_budget(
            float(doc["budget_mw"]),
            training=params_from_dict(doc.get("training", {}), "training"),
            finetune=params_from_dict(doc.get("finetune_params", {}), "finetune"),
            n_small_training=int(doc.get("n_small_training", 2)),
            n_finetune=int(doc.get("n_finetune", 2)),
            ratio=tuple(doc.get("ratio", DEFAULT_SPLIT)),
            dominant_f0=tuple(doc["dominant_f0"]) if doc.get("dominant_f0") else None,
        )
    unknown = set(doc) - {"dominant", "small_training", "finetune"}
    if unknown:
        raise WorkloadConfigError(f"unknown mix key(s): {sorted(unknown)}")
    dom = doc.get("dominant")
    return WorkloadMix(
        dominant=params_from_dict(dom, "training") if dom is not None else None,
        small_training=[params_from_dict(d, "training") for d in doc.get("small_training", [])],
        finetune=[params_from_dict(d, "finetune") for d in doc.get("finetune", [])],
    )


def write_trace(trace: PowerTrace, path) -> None:
    """Write CSV or JSON depending on the file suffix."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        path.write_text(trace.to_json())
    else:
        trace.to_csv(path)
