"""Oscillation analytics: eigenanalysis, Prony fitting, spectra, mode energy and shape."""
from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Hashable, Mapping, Sequence

import numpy as np
import scipy.linalg as la
from scipy.signal import windows

from dcosc.netmodel import GridModel, OperatingPoint, build_ybus

log = logging.getLogger(__name__)

DEFAULT_MODE_TOL_HZ = 0.15
WINDOWS = ("rectangular", "hann")
PENCIL_MAX = 200  # Hankel width cap; bounds the SVD cost on long records


class PronyError(ValueError):
    def __init__(self, message, condition=float("nan")):
        super().__init__(message)
        self.condition = condition


@dataclass(frozen=True)
class ModeEstimate:
    """One oscillatory mode ``A e^{sigma t} cos(2 pi f t + phase)``.

    ``amplitude``/``phase``/``pseudo_energy`` are None for modes that come
    from a state matrix rather than a signal.
    """

    frequency_hz: float
    sigma_per_s: float
    damping_ratio: float
    amplitude: float | None = None
    phase_rad: float | None = None
    pseudo_energy: float | None = None

    @property
    def unstable(self) -> bool:
        return self.sigma_per_s > 0

    @property
    def eigenvalue(self) -> complex:
        return complex(self.sigma_per_s, 2 * math.pi * self.frequency_hz)

    def to_dict(self) -> dict:
        return {**asdict(self), "unstable": self.unstable}

    @classmethod
    def from_root(cls, s: complex, amplitude=None, phase=None) -> "ModeEstimate":
        sigma, omega = float(s.real), abs(float(s.imag))
        return cls(frequency_hz=omega / (2 * math.pi), sigma_per_s=sigma,
                   damping_ratio=-sigma / math.hypot(sigma, omega),
                   amplitude=amplitude, phase_rad=phase)


@dataclass(frozen=True, eq=False)
class Spectrum:
    freq_hz: np.ndarray
    amplitude: np.ndarray
    window: str
    resolution_hz: float
    # Per-bin weights turning squared amplitudes into mean-square signal power.
    _power_weight: np.ndarray = field(repr=False, default=None)

    def dominant(self, f_min: float = 0.0, f_max: float = math.inf) -> tuple[float, float]:
        """(frequency, amplitude) of the largest non-DC bin within [f_min, f_max]."""
        sel = (self.freq_hz > 0) & (self.freq_hz >= f_min) & (self.freq_hz <= f_max)
        if not np.any(sel):
            return float("nan"), 0.0
        k = np.flatnonzero(sel)[np.argmax(self.amplitude[sel])]
        return float(self.freq_hz[k]), float(self.amplitude[k])

    def power(self) -> float:
        """Mean-square value implied by the spectrum (exact for the rectangular window)."""
        return float(np.sum(self._power_weight * self.amplitude ** 2))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["freq_hz", "amplitude"])
            for f, a in zip(self.freq_hz, self.amplitude):
                w.writerow([repr(float(f)), repr(float(a))])


# --- eigenanalysis ---------------------------------------------------------

def _reduced_admittance(grid: GridModel, op: OperatingPoint):
    """Network seen from generator internal nodes (plus the infinite bus, if any).

    All loads, fluctuating slots at nominal included, are constant admittances
    at the operating-point voltage.
    """
    idx = grid.bus_index
    sb = grid.mva_base
    n = len(grid.buses)
    y = build_ybus(grid).toarray()
    v = op.voltage
    slots = grid.slot_mw()
    for bus in {ld.bus for ld in grid.loads} | set(slots):
        p, q = grid.bus_load(bus)
        p += slots.get(bus, 0.0)
        i = idx[bus]
        y[i, i] += complex(p, -q) / sb / abs(v[i]) ** 2
    gens = grid.generators
    ng = len(gens)
    y_int = np.array([1 / (1j * g.xd_prime) for g in gens])
    gpos = [idx[g.bus] for g in gens]
    for k, i in enumerate(gpos):
        y[i, i] += y_int[k]
    # Internal nodes first, then all buses; eliminate buses except the infinite one.
    big = np.zeros((ng + n, ng + n), dtype=complex)
    big[ng:, ng:] = y
    for k, i in enumerate(gpos):
        big[k, k] = y_int[k]
        big[k, ng + i] = big[ng + i, k] = -y_int[k]
    inf = grid.infinite_bus
    keep = list(range(ng)) + ([ng + idx[inf.id]] if inf is not None else [])
    elim = [j for j in range(ng + n) if j not in keep]
    y_bb = big[np.ix_(elim, elim)]
    if abs(np.linalg.det(y_bb)) == 0 or np.linalg.cond(y_bb) > 1e14:
        raise la.LinAlgError("singular network reduction (islanded generator?)")
    red = big[np.ix_(keep, keep)] - big[np.ix_(keep, elim)] @ la.solve(y_bb, big[np.ix_(elim, keep)])
    sources = np.array(list(op.emf * np.exp(1j * op.rotor_angle))
                       + ([v[idx[inf.id]]] if inf is not None else []))
    return red, sources


def linearize(grid: GridModel, op: OperatingPoint) -> np.ndarray:
    """Analytic state matrix of the classical model around ``op``.

    States are ordered ``[delta_1..delta_n, omega_1..omega_n]`` with speed in
    per unit, matching :class:`dcosc.dynsim.SwingSystem`.
    """
    red, src = _reduced_admittance(grid, op)
    ng = len(grid.generators)
    sb = grid.mva_base
    e = src
    # dPe_i/d(delta_j) = Re(j E_i conj(Y_ij E_j)) * (-1) for j != i, from
    # Pe_i = Re(E_i conj(sum_j Y_ij E_j)).
    k = np.zeros((ng, ng))
    for i in range(ng):
        for j in range(len(e)):
            if j == i:
                continue
            coupling = (1j * e[i] * np.conj(red[i, j] * e[j])).real
            if j < ng:
                k[i, j] = -coupling
            k[i, i] += coupling
    h = np.array([g.h_on(sb) for g in grid.generators])
    d = np.array([g.d_on(sb) for g in grid.generators])
    a = np.zeros((2 * ng, 2 * ng))
    a[:ng, ng:] = grid.omega_s * np.eye(ng)
    a[ng:, :ng] = -k / (2 * h[:, None])
    a[ng:, ng:] = -np.diag(d / (2 * h))
    return a


def state_labels(grid: GridModel) -> list[str]:
    return [f"delta_{g.bus}" for g in grid.generators] + [f"omega_{g.bus}" for g in grid.generators]


def _oscillatory(eigs: np.ndarray, a: np.ndarray, rel_tol: float = 1e-9,
                 zero_tol: float = 1e-6) -> np.ndarray:
    """Eigenvalues with positive imaginary part that are not numerically zero.

    Without damping, the rigid-body angle/speed pair is a defective double zero
    that eig splits into a spurious ``+-j`` pair of order ``sqrt(eps * |A|)``;
    ``zero_tol * |A|_1`` sits well above that split.
    """
    scale = max(1.0, float(np.max(np.abs(eigs)))) if eigs.size else 1.0
    norm = max(1.0, float(np.linalg.norm(a, 1))) if a.size else 1.0
    return (eigs.imag > rel_tol * scale) & (np.abs(eigs) > zero_tol * norm)


def eigen_modes(a: np.ndarray) -> list[ModeEstimate]:
    """Oscillatory modes of a real state matrix, one per conjugate pair, by frequency.

    Real eigenvalues (angle reference, speed-damping) and numerically zero
    ones are not modes in this sense and are omitted.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("state matrix must be square")
    eigs = la.eigvals(a)
    modes = [ModeEstimate.from_root(s) for s in eigs[_oscillatory(eigs, a)]]
    return sorted(modes, key=lambda m: (m.frequency_hz, m.sigma_per_s))


@dataclass(frozen=True, eq=False)
class Participation:
    eigenvalues: np.ndarray
    factors: np.ndarray  # (n_states, n_eigenvalues), each column scaled to max 1
    pseudo: bool = False  # True when the eigenvector matrix was near-defective


def participation(a: np.ndarray, cond_limit: float = 1e10) -> Participation:
    """Participation magnitudes ``|left_ki * right_ki|``, normalized per mode."""
    a = np.asarray(a, dtype=float)
    eigs, vl, vr = la.eig(a, left=True, right=True)
    pseudo = np.linalg.cond(vr) > cond_limit
    if pseudo:
        warnings.warn("state matrix is (nearly) defective; participation is approximate",
                      RuntimeWarning, stacklevel=2)
        w = np.linalg.pinv(vr).T
    else:
        # scipy returns vl with vl^H a = lambda vl^H; rescale so w^T r = 1.
        w = np.conj(vl)
        w = w / np.sum(w * vr, axis=0)
    p = np.abs(w * vr)
    p = p / np.max(p, axis=0, keepdims=True)
    return Participation(eigs, p, bool(pseudo))


def mode_locations(grid: GridModel, op: OperatingPoint) -> list[tuple[ModeEstimate, int]]:
    """Each oscillatory mode with the generator bus that participates most in it."""
    a = linearize(grid, op)
    part = participation(a)
    ng = len(grid.generators)
    out = []
    for col in np.flatnonzero(_oscillatory(part.eigenvalues, a)):
        per_gen = part.factors[:ng, col] + part.factors[ng:, col]
        out.append((ModeEstimate.from_root(part.eigenvalues[col]),
                    grid.generators[int(np.argmax(per_gen))].bus))
    return sorted(out, key=lambda t: t[0].frequency_hz)


# --- signal analysis -------------------------------------------------------

def default_prony_order(n_samples: int) -> int:
    return max(2, min(20, n_samples // 10))


def prony_fit(signal, dt: float, model_order: int | None = None,
              min_relative_amplitude: float = 0.01) -> list[ModeEstimate]:
    """Fit damped sinusoids to ``signal`` (Prony family, matrix-pencil form).

    The mean is removed first.  The poles come from a Hankel matrix of the
    signal truncated to its ``model_order`` leading singular vectors, which
    keeps the estimate unbiased under broadband noise where plain
    least-squares prediction drifts badly.  Poles map to continuous time
    through ``log(z) / dt``; complex amplitudes then follow from a
    Vandermonde least-squares fit.  Only oscillatory poles are reported, each
    conjugate pair once with amplitude ``2|B|``, and modes below
    ``min_relative_amplitude`` of the largest are dropped.

    Returns:
        Modes sorted by decreasing amplitude.

    Raises:
        PronyError: if the order exceeds a third of the signal length or the
            signal carries no information.
    """
    x = np.asarray(signal, dtype=float)
    n = x.size
    p = default_prony_order(n) if model_order is None else int(model_order)
    if p < 1 or 3 * p > n:
        raise PronyError(f"model order {p} needs at least {3 * p} samples, got {n}")
    x = x - x.mean()
    pencil = max(2 * p, min(n // 3, PENCIL_MAX))
    _, sv, vh = la.svd(la.hankel(x[:n - pencil], x[n - pencil - 1:]), full_matrices=False)
    if not sv[0] > 0 or not np.all(np.isfinite(sv)):
        raise PronyError("signal is flat after removing its mean", float("inf"))
    cond = float(sv[0] / sv[p - 1]) if sv[p - 1] > 0 else float("inf")
    log.debug("prony: order %d, pencil %d, condition %.3g", p, pencil, cond)
    v = vh[:p].conj().T
    z = la.eigvals(la.lstsq(v[:-1], v[1:], lapack_driver="gelsd")[0])
    z = z[np.abs(z) > 1e-12]
    s = np.log(z.astype(complex)) / dt
    vand = np.exp(np.outer(np.arange(n) * dt, s))
    resid, *_ = la.lstsq(vand, x.astype(complex), lapack_driver="gelsd")
    modes = []
    for si, bi in zip(s, resid):
        if si.imag <= 0 or not np.isfinite(bi):
            continue
        modes.append(ModeEstimate.from_root(si, amplitude=2 * abs(bi), phase=float(np.angle(bi))))
    if not modes:
        return []
    top = max(m.amplitude for m in modes)
    modes = [m for m in modes if m.amplitude >= min_relative_amplitude * top]
    return sorted(modes, key=lambda m: -m.amplitude)


def fft_spectrum(signal, dt: float, window: str = "rectangular") -> Spectrum:
    """Single-sided amplitude spectrum, corrected for the window's coherent gain.

    A sinusoid of amplitude A that falls on a bin reads A at that bin.
    """
    x = np.asarray(signal, dtype=float)
    n = x.size
    if n < 2:
        raise ValueError("a spectrum needs at least two samples")
    if window == "rectangular":
        w = np.ones(n)
    elif window == "hann":
        w = windows.hann(n, sym=False)
    else:
        raise ValueError(f"unknown window {window!r}; choose from {WINDOWS}")
    gain = w.sum()
    mag = np.abs(np.fft.rfft(x * w)) / gain
    weight = np.full(mag.size, 0.5)
    weight[0] = 1.0
    if n % 2 == 0:
        weight[-1] = 1.0
    amp = np.where(weight == 0.5, 2 * mag, mag)
    return Spectrum(np.fft.rfftfreq(n, dt), amp, window, 1.0 / (n * dt), weight)


def pseudo_energy(mode: ModeEstimate | tuple[float, float], duration: float) -> float:
    """Energy of the mode's envelope over ``[0, duration]``: integral of ``A^2 e^{2 sigma t}``."""
    if not duration > 0:
        raise ValueError("duration must be positive")
    if isinstance(mode, ModeEstimate):
        amp, sigma = mode.amplitude or 0.0, mode.sigma_per_s
    else:
        amp, sigma = mode
    x = 2.0 * sigma * duration
    if abs(x) < 1e-300:
        return amp * amp * duration
    return amp * amp * duration * math.expm1(x) / x


def with_pseudo_energy(modes: Sequence[ModeEstimate], duration: float) -> list[ModeEstimate]:
    from dataclasses import replace
    return [replace(m, pseudo_energy=pseudo_energy(m, duration)) for m in modes]


def normalized_pseudo_energy(modes: Sequence[ModeEstimate], duration: float) -> list[float]:
    """Pseudo energies divided by the largest in the set."""
    e = [pseudo_energy(m, duration) for m in modes]
    top = max(e, default=0.0)
    return [v / top if top > 0 else 0.0 for v in e]


@dataclass(frozen=True)
class ModeShape:
    target_hz: float
    entries: dict  # channel -> (amplitude, phase in (-pi, pi])
    reference: Hashable | None
    excluded: tuple = ()


def wrap_phase(phi: float) -> float:
    """Wrap to (-pi, pi]."""
    w = math.remainder(phi, 2 * math.pi)
    return math.pi if w == -math.pi else w


def mode_shape(signals: Mapping[Hashable, Sequence[float]], dt: float, target_hz: float,
               tolerance_hz: float = DEFAULT_MODE_TOL_HZ,
               model_order: int | None = None) -> ModeShape:
    """Relative amplitude and phase of one mode across channels.

    Each channel is fitted separately; its mode closest to ``target_hz``
    (within the tolerance) supplies the complex amplitude.  Phases are
    rotated so the largest-amplitude channel sits at 0; channels without a
    matching mode (flat ones included) are listed in ``excluded``.
    """
    lengths = {len(v) for v in signals.values()}
    if len(lengths) > 1:
        raise ValueError("all signals must share the time axis")
    n = lengths.pop() if lengths else 0
    p = default_prony_order(n) if model_order is None else int(model_order)
    if p < 1 or 3 * p > n:
        raise PronyError(f"model order {p} needs at least {3 * p} samples, got {n}")
    found = {}
    excluded = []
    for key, sig in signals.items():
        try:
            fitted = prony_fit(sig, dt, p)
        except PronyError:
            fitted = []
        modes = [m for m in fitted if abs(m.frequency_hz - target_hz) <= tolerance_hz]
        if not modes:
            excluded.append(key)
            continue
        best = min(modes, key=lambda m: (abs(m.frequency_hz - target_hz), -m.amplitude))
        found[key] = (best.amplitude, best.phase_rad)
    if not found:
        return ModeShape(target_hz, {}, None, tuple(excluded))
    ref = max(found, key=lambda k: found[k][0])
    ref_phase = found[ref][1]
    entries = {k: (a, wrap_phase(ph - ref_phase)) for k, (a, ph) in found.items()}
    return ModeShape(target_hz, entries, ref, tuple(excluded))


def modes_to_json(modes: Sequence[ModeEstimate]) -> str:
    return json.dumps([m.to_dict() for m in modes], sort_keys=True, indent=1)


def modes_to_csv(modes: Sequence[ModeEstimate], path) -> None:
    cols = ["frequency_hz", "sigma_per_s", "damping_ratio", "amplitude", "phase_rad",
            "pseudo_energy", "unstable"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for m in modes:
            d = m.to_dict()
            w.writerow(["" if d[c] is None else repr(d[c]) for c in cols])
