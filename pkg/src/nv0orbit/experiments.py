"""Simulated measurement protocols, each producing a Dataset.

Protocols share an optical setup (pump rate, branching, pulse lengths)
described by ``OpticalSettings``. PL-derived observables are noiseless
unless a seed is given, in which case Poisson counting noise is drawn at
the configured brightness.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import estimation
from .dynamics import (
    DensityState,
    MicrowavePulse,
    OpticalPump,
    PulseSequence,
    Readout,
    Wait,
    averaged_over_offsets,
    collapse_set,
    dressed_states,
    evolve,
    liouvillian,
    lorentzian,
    propagate_exact,
    run_concurrently,
)
from .fields import ElectrodeGeometry, electrode_field, lab_to_nv
from .hamiltonian import NVParams, drive_rabi_frequency, eigen_closed_form, transition_frequency


@dataclass
class Dataset:
    """Sampled observable(s) on a common x axis.

    ``y`` is either one row (shape (n,)) or a stack of rows (shape (k, n)),
    one per entry of ``y_labels``.
    """

    x: np.ndarray
    y: np.ndarray
    x_unit: str
    y_unit: str
    x_label: str = "x"
    y_labels: tuple = ("y",)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).reshape(-1)
        self.y = np.asarray(self.y, dtype=float)
        if self.y.ndim == 2 and self.y.shape[0] == 1:
            self.y = self.y[0]
        if self.y.ndim not in (1, 2) or self.y.shape[-1] != self.x.size:
            raise ValueError(f"y shape {self.y.shape} does not match {self.x.size} x values")
        rows = 1 if self.y.ndim == 1 else self.y.shape[0]
        self.y_labels = tuple(str(s) for s in self.y_labels)
        if len(self.y_labels) != rows:
            raise ValueError(f"{rows} y rows but {len(self.y_labels)} labels")
        if not self.x_unit or not self.y_unit:
            raise ValueError("x_unit and y_unit must be nonempty")
        self.meta = {str(k): str(v) for k, v in self.meta.items()}

    @property
    def rows(self) -> np.ndarray:
        return self.y.reshape(-1, self.x.size)

    def column(self, label: str) -> np.ndarray:
        return self.rows[self.y_labels.index(label)]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (np.array_equal(self.x, other.x, equal_nan=True) and self.y.shape == other.y.shape
                and np.array_equal(self.y, other.y, equal_nan=True) and self.x_unit == other.x_unit
                and self.y_unit == other.y_unit and self.x_label == other.x_label
                and self.y_labels == other.y_labels and self.meta == other.meta)


@dataclass(frozen=True)
class OpticalSettings:
    pump_rate: float = 1e8
    branching_back: float = 0.5
    init_duration: float = 1e-6
    readout_duration: float = 100e-9
    bin_width: float = 10e-9
    brightness: float = 1e4  # expected counts for a normalised signal of 1

    def init_segment(self):
        return OpticalPump(self.init_duration, self.pump_rate, self.branching_back, self.bin_width)

    def readout_segment(self, first_bin_only: bool = False):
        # later bins cannot change the first one, so protocols that read only B skip them
        duration = min(self.bin_width, self.readout_duration) if first_bin_only else self.readout_duration
        return Readout(duration, self.pump_rate, self.bin_width, self.branching_back)


def params_snapshot(params: NVParams) -> str:
    return json.dumps(dataclasses.asdict(params), sort_keys=True)


def _meta(protocol, params, seed, **extra):
    meta = {"protocol": protocol, "params": params_snapshot(params), "seed": "" if seed is None else str(seed)}
    meta.update({k: str(v) for k, v in extra.items()})
    return meta


def _poisson_ratio(rng, numer, denom, brightness):
    """Ratio of independently Poisson-sampled counts at the given scale."""
    ref = rng.poisson(brightness)
    counts = rng.poisson(brightness * np.clip(np.asarray(numer) / denom, 0, None))
    return counts / max(ref, 1)


def _poisson_scaled(rng, values, brightness):
    values = np.asarray(values, dtype=float)
    peak = float(np.max(np.abs(values))) or 1.0
    return rng.poisson(brightness * np.clip(values, 0, None) / peak) * (peak / brightness)


def _initialise(params, geom, optics, settle):
    """Relaxed start, pump, dark settle gap; returns (state, A)."""
    settle = 5.0 / params.gamma_rad if settle is None else settle
    seq = PulseSequence((optics.init_segment(), Wait(settle)))
    state, trace = evolve(DensityState.pure(0), seq, params, geom)
    return state, trace.first_bin(0), settle


# -------------------------------------------------------------------- PLE

def ple_scan(params: NVParams, geom: ElectrodeGeometry | None = None, electrode: str = "dc",
             volts=(0.0,)) -> Dataset:
    """Ground-branch energies E_minus (|0>), E_plus (|1>) and their difference per dc voltage."""
    geom = geom or ElectrodeGeometry()
    volts = np.asarray(volts, dtype=float)
    if not np.all(np.isfinite(volts)):
        raise ValueError("voltages must be finite")
    rows = np.empty((3, volts.size))
    for i, v in enumerate(volts):
        e_nv = lab_to_nv(electrode_field(geom, electrode, v), geom)
        e_plus, e_minus, _ = eigen_closed_form(params, e_nv)
        rows[:, i] = (e_minus, e_plus, e_plus - e_minus)
    return Dataset(volts, rows, "V", "Hz", "voltage", ("branch_0", "branch_1", "difference"),
                   _meta("ple-scan", params, None, electrode=electrode))


# --------------------------------------------------------------------- T1

def t1_protocol(params: NVParams, delays, optics: OpticalSettings = OpticalSettings(),
                seed: int | None = None, workers: int = 1, settle: float | None = None) -> Dataset:
    """Pump, wait, read out; y = B/A from the first PL bins of the two laser pulses.

    The system starts fully relaxed into |0>, so B/A tends to 1 at long delay.
    A fixed dark gap ``settle`` (default five excited-state lifetimes) precedes
    each delay so that the excited level has emptied and the recovery seen
    over ``delays`` is a single exponential in T1.
    """
    delays = np.asarray(delays, dtype=float)
    if np.any(delays < 0) or not np.all(np.isfinite(delays)):
        raise ValueError("delays must be finite and >= 0")
    pumped, a, settle = _initialise(params, None, optics, settle)

    def point(delay):
        _, tr = evolve(pumped, PulseSequence((Wait(float(delay)), optics.readout_segment(first_bin_only=True))), params)
        return tr.first_bin(1)

    b = np.array(run_concurrently(point, list(delays), workers))
    if seed is None:
        y = b / a
    else:
        y = _poisson_ratio(np.random.default_rng(seed), b, a, optics.brightness)
    return Dataset(delays, y, "s", "1", "delay", ("B/A",), _meta("t1", params, seed, settle=repr(settle)))


# ------------------------------------------------------------------- ODER

def _detuning_liouvillians(g: float, deltas: np.ndarray, collapse: list) -> np.ndarray:
    """L(delta) for the drive Hamiltonian with rotating-frame detuning ``delta``; linear in delta."""
    h0 = np.zeros((3, 3), dtype=complex)
    h0[0, 1] = h0[1, 0] = g
    base = liouvillian(h0, collapse)
    unit = liouvillian(np.diag([-0.5, 0.5, 0.0]).astype(complex), [])
    return base[None, :, :] + deltas[:, None, None] * unit[None, :, :]


def _pl_integrals(sups, rho0, duration, gamma_rad, chunk=512):
    out = np.empty(sups.shape[0])
    for lo in range(0, sups.shape[0], chunk):
        _, integral = propagate_exact(sups[lo:lo + chunk], rho0, duration)
        out[lo:lo + chunk] = gamma_rad * integral[:, 2, 2].real / duration
    return out


def oder_homogeneous(params, g, deltas, pump_rate, branching_back, duration):
    """Mean PL rate over the readout window versus microwave detuning (no broadening)."""
    collapse = collapse_set(params, Readout(duration, pump_rate, duration, branching_back))
    sups = _detuning_liouvillians(g, np.asarray(deltas, dtype=float), collapse)
    return _pl_integrals(sups, DensityState.pure(0).rho, duration, params.gamma_rad)


def _check_nodes(fwhm, n_nodes, homogeneous, where):
    """Central Gauss-Hermite spacing sigma*pi/sqrt(n) must resolve the homogeneous line."""
    if fwhm <= 0:
        return
    spacing = fwhm * estimation.FWHM_TO_SIGMA * math.pi / math.sqrt(n_nodes)
    if spacing > 0.5 * homogeneous:
        need = int(math.ceil((2.0 * fwhm * estimation.FWHM_TO_SIGMA * math.pi / homogeneous) ** 2))
        raise ValueError(f"{where}: n_nodes={n_nodes} spaces the quadrature {spacing / 1e6:.3g} MHz apart, "
                         f"coarser than half the {homogeneous / 1e6:.3g} MHz homogeneous line; use >= {need}")


def oder_scan(params: NVParams, geom: ElectrodeGeometry | None = None, drive_power: float = 1e-6,
              freqs=(), pump_rate: float = 2e7, branching_back: float = 0.5,
              duration: float = 1e-6, n_nodes: int = 4001, grid_step: float | None = None,
              seed: int | None = None, brightness: float = 1e4, electrode: str = "ac") -> Dataset:
    """Mean PL under a weak laser plus a microwave at each frequency, inhomogeneously broadened.

    The transition frequency of each member of the ensemble is shifted by a
    Gaussian offset of FWHM ``params.optical_linewidth_fwhm``. The
    homogeneous response is tabulated on a detuning grid (step ``grid_step``)
    and interpolated at the quadrature nodes.
    """
    geom = geom or ElectrodeGeometry()
    freqs = np.asarray(freqs, dtype=float)
    if freqs.size == 0 or np.any(freqs <= 0):
        raise ValueError("freqs must be nonempty and > 0")
    f0 = transition_frequency(params)
    g = 0.5 * drive_rabi_frequency(params, geom, drive_power, electrode) if drive_power > 0 else 0.0
    fwhm = params.optical_linewidth_fwhm
    sigma = fwhm * estimation.FWHM_TO_SIGMA
    homog = 1.0 / (math.pi * params.T2star) + 2.0 * g + pump_rate / (2.0 * math.pi)
    _check_nodes(fwhm, n_nodes, homog, "oder_scan")
    step = grid_step or max(min(homog / 8.0, fwhm / 50.0 if fwhm > 0 else homog), 1e3)
    d_lo = f0 - freqs.max() - 8.0 * sigma
    d_hi = f0 - freqs.min() + 8.0 * sigma
    grid = np.linspace(d_lo, d_hi, max(3, int(math.ceil((d_hi - d_lo) / step)) + 1))
    line = oder_homogeneous(params, g, grid, pump_rate, branching_back, duration)

    def at(offsets):
        return np.interp((f0 - freqs)[None, :] + offsets[:, None], grid, line)

    pl = averaged_over_offsets(at, fwhm, n_nodes)
    if seed is not None:
        pl = _poisson_scaled(np.random.default_rng(seed), pl, brightness)
    return Dataset(freqs, pl, "Hz", "1/s", "mw_frequency", ("pl_rate",),
                   _meta("oder", params, seed, drive_power=repr(float(drive_power)), resonance=repr(f0)))


# -------------------------------------------------------- Autler-Townes map

def splitting_homogeneous(params, g, probe, pump_rate, branching_back, duration):
    """Mean PL versus probe-laser detuning with a resonant drive of half Rabi frequency g."""
    h = np.zeros((3, 3), dtype=complex)
    h[0, 1] = h[1, 0] = g
    nus, weights, kets = dressed_states(h)
    base = liouvillian(h, collapse_set(params, Readout(duration, 0.0, duration, branching_back)))
    probe = np.asarray(probe, dtype=float)
    sups = np.broadcast_to(base, (probe.size,) + base.shape).copy()
    for nu_d, weight, ket in zip(nus, weights, kets):
        jump = np.zeros((3, 3), dtype=complex)
        jump[2, :] = ket.conj()
        unit = liouvillian(np.zeros((3, 3), dtype=complex), [(jump, 1.0)])
        rates = pump_rate * weight * lorentzian(probe - nu_d, params.optical_homogeneous_fwhm)
        sups += rates[:, None, None] * unit[None, :, :]
    return _pl_integrals(sups, DensityState.pure(0).rho, duration, params.gamma_rad)


@dataclass
class SplittingMap:
    pl_map: Dataset
    splitting: Dataset
    resolved: np.ndarray
    slope_fit: estimation.FitResult | None

    @property
    def slope(self) -> float:
        """Splitting per sqrt(power), Hz/sqrt(W); NaN when fewer than two resolved points."""
        return float(self.slope_fit.theta[0]) if self.slope_fit is not None else math.nan


def extract_splitting(x, y, min_prominence: float = 0.1):
    """Peak separation from a two-Gaussian fit; (separation, resolved).

    A separation below the fitted FWHM counts as unresolved and is reported as 0.
    """
    from scipy.signal import find_peaks

    x, y = np.asarray(x, float), np.asarray(y, float)
    span = float(np.ptp(y))
    if span == 0:
        return 0.0, False
    base = float(np.min(y))
    peaks, _ = find_peaks(np.concatenate([[base], y, [base]]), prominence=min_prominence * span)
    peaks = peaks - 1
    single = estimation.fit(estimation.GAUSSIAN_LINE, (x, y))
    if peaks.size >= 2:
        top = peaks[np.argsort(y[peaks])[-2:]]
        c1, c2 = sorted(x[top])
        width = min(single["fwhm"], 0.8 * (c2 - c1))
    else:
        c, width = single["center"], single["fwhm"]
        c1, c2 = c - width / 4, c + width / 4
    amp = float(np.max(y) - base)
    theta0 = [amp, c1, amp, c2, abs(width), base]
    res = estimation.fit(estimation.DOUBLE_GAUSSIAN, (x, y), theta0)
    sep = abs(res["center2"] - res["center1"])
    if not res.converged or sep < abs(res["fwhm"]) or min(res["amp1"], res["amp2"]) <= 0:
        return 0.0, False
    return float(sep), True


def splitting_map(params: NVParams, geom: ElectrodeGeometry | None = None, powers=(), freqs=(),
                  pump_rate: float = 1e6, branching_back: float = 0.5, duration: float = 1e-6,
                  n_nodes: int = 4001, grid_step: float | None = None, seed: int | None = None,
                  brightness: float = 1e4, electrode: str = "ac", workers: int = 1) -> SplittingMap:
    """Probe-laser spectra under a resonant microwave drive at each power.

    ``freqs`` are probe-laser detunings from the undriven |0> -> |2> line. The
    dressed states produce two lines separated by the Rabi frequency; their
    separation is extracted per power and fitted linearly against sqrt(P)
    using only resolved points.
    """
    geom = geom or ElectrodeGeometry()
    powers = np.asarray(powers, dtype=float)
    freqs = np.asarray(freqs, dtype=float)
    if powers.size == 0 or np.any(powers < 0):
        raise ValueError("powers must be nonempty and >= 0")
    if freqs.size < 7:
        raise ValueError("need at least 7 probe detunings")
    fwhm = params.optical_linewidth_fwhm
    _check_nodes(fwhm, n_nodes, params.optical_homogeneous_fwhm, "splitting_map")
    sigma = fwhm * estimation.FWHM_TO_SIGMA
    step = grid_step or max(min(params.optical_homogeneous_fwhm / 4.0, fwhm / 50.0 if fwhm > 0 else math.inf), 1e3)
    lo, hi = freqs.min() - 8.0 * sigma, freqs.max() + 8.0 * sigma
    grid = np.linspace(lo, hi, max(3, int(math.ceil((hi - lo) / step)) + 1))

    def one(power):
        g = 0.5 * drive_rabi_frequency(params, geom, float(power), electrode) if power > 0 else 0.0
        line = splitting_homogeneous(params, g, grid, pump_rate, branching_back, duration)
        return averaged_over_offsets(lambda o: np.interp(freqs[None, :] - o[:, None], grid, line), fwhm, n_nodes)

    rows = np.array(run_concurrently(one, list(powers), workers))
    if seed is not None:
        rng = np.random.default_rng(seed)
        rows = np.array([_poisson_scaled(rng, r, brightness) for r in rows])
    extracted = [extract_splitting(freqs, r) for r in rows]
    seps = np.array([s for s, _ in extracted])
    resolved = np.array([ok for _, ok in extracted], dtype=bool)
    sqrt_p = np.sqrt(powers)
    slope_fit = None
    if resolved.sum() >= 2:
        slope_fit = estimation.fit(estimation.LINEAR_ORIGIN, (sqrt_p[resolved], seps[resolved]))
    meta = _meta("splitting-map", params, seed)
    labels = tuple(f"P={float(p)!r}W" for p in powers)
    pl_map = Dataset(freqs, rows, "Hz", "1/s", "probe_detuning", labels, meta)
    smeta = dict(meta, resolved=",".join("1" if r else "0" for r in resolved),
                 slope=repr(slope_fit.theta[0] if slope_fit else math.nan))
    split = Dataset(sqrt_p, seps, "sqrt(W)", "Hz", "sqrt_power", ("splitting",), smeta)
    return SplittingMap(pl_map, split, resolved, slope_fit)


# ------------------------------------------------------------------- Rabi

def rabi_scan(params: NVParams, geom: ElectrodeGeometry | None = None, power: float = 828e-6,
              widths=(), optics: OpticalSettings = OpticalSettings(), seed: int | None = None,
              electrode: str = "ac", workers: int = 1, settle: float | None = None) -> Dataset:
    """Pump, resonant pulse of each width, read out; y = B/A."""
    geom = geom or ElectrodeGeometry()
    widths = np.asarray(widths, dtype=float)
    if np.any(widths < 0) or not np.all(np.isfinite(widths)):
        raise ValueError("widths must be finite and >= 0")
    f0 = transition_frequency(params)
    pumped, a, settle = _initialise(params, geom, optics, settle)

    def point(width):
        seq = PulseSequence((MicrowavePulse(float(width), power, f0, 0.0, electrode), optics.readout_segment(first_bin_only=True)))
        _, tr = evolve(pumped, seq, params, geom)
        return tr.first_bin(1)

    b = np.array(run_concurrently(point, list(widths), workers))
    y = b / a if seed is None else _poisson_ratio(np.random.default_rng(seed), b, a, optics.brightness)
    f_r = drive_rabi_frequency(params, geom, power, electrode)
    return Dataset(widths, y, "s", "1", "pulse_width", ("B/A",),
                   _meta("rabi", params, seed, power=repr(float(power)), rabi_frequency=repr(f_r)))


# ----------------------------------------------------------------- Ramsey

RAMSEY_PI2 = 4.6e-9


def ramsey_power(params: NVParams, geom: ElectrodeGeometry | None = None, pi2_width: float = RAMSEY_PI2,
                 electrode: str = "ac") -> float:
    """Power whose resonant Rabi frequency makes ``pi2_width`` a pi/2 pulse."""
    geom = geom or ElectrodeGeometry()
    per_sqrt_w = drive_rabi_frequency(params, geom, 1.0, electrode)
    if per_sqrt_w == 0:
        raise ValueError("drive susceptibility or geometry gives no Rabi coupling")
    return (1.0 / (4.0 * pi2_width * per_sqrt_w)) ** 2


def ramsey_scan(params: NVParams, geom: ElectrodeGeometry | None = None, detuning: float = 58e6,
                delays=(), power: float | None = None, optics: OpticalSettings = OpticalSettings(),
                phase_cycle: bool = True, seed: int | None = None, electrode: str = "ac",
                workers: int = 1, settle: float | None = None) -> Dataset:
    """Two pi/2 pulses detuned by ``detuning`` around a variable free evolution.

    The pi/2 width is 1/(4 f_R) from the calibrated Rabi frequency; when
    ``power`` is omitted the 4.6 ns width is targeted. With ``phase_cycle``
    the signal is the difference between second-pulse phases 0 and pi, which
    cancels the population relaxation that otherwise adds a slow drift to
    the fringe baseline.
    """
    geom = geom or ElectrodeGeometry()
    delays = np.asarray(delays, dtype=float)
    if np.any(delays < 0) or not np.all(np.isfinite(delays)):
        raise ValueError("delays must be finite and >= 0")
    power = ramsey_power(params, geom, electrode=electrode) if power is None else power
    f_r = drive_rabi_frequency(params, geom, power, electrode)
    if f_r <= 0:
        raise ValueError("zero drive power gives no pi/2 pulse")
    pi2 = 1.0 / (4.0 * f_r)
    f_drive = transition_frequency(params) - detuning
    pumped, a, settle = _initialise(params, geom, optics, settle)

    def shot(delay, phase):
        seq = PulseSequence((
            MicrowavePulse(pi2, power, f_drive, 0.0, electrode),
            Wait(float(delay)),
            MicrowavePulse(pi2, power, f_drive, phase, electrode),
            optics.readout_segment(first_bin_only=True),
        ))
        _, tr = evolve(pumped, seq, params, geom)
        return tr.first_bin(3)

    def point(delay):
        b0 = shot(delay, 0.0)
        return (b0, shot(delay, math.pi)) if phase_cycle else (b0, 0.0)

    pairs = np.array(run_concurrently(point, list(delays), workers))
    if seed is None:
        y = (pairs[:, 0] - pairs[:, 1]) / a
    else:
        rng = np.random.default_rng(seed)
        y = _poisson_ratio(rng, pairs[:, 0], a, optics.brightness)
        if phase_cycle:
            y = y - _poisson_ratio(rng, pairs[:, 1], a, optics.brightness)
    return Dataset(delays, y, "s", "1", "free_evolution", ("B/A",),
                   _meta("ramsey", params, seed, detuning=repr(float(detuning)), power=repr(float(power)),
                         pi2_width=repr(pi2), phase_cycle=phase_cycle))


# ----------------------------------------------------------- standard fits

def fit_t1(ds: Dataset) -> estimation.FitResult:
    return estimation.fit(estimation.T1_RECOVERY, ds)


def fit_damped_sine(ds: Dataset) -> estimation.FitResult:
    """Damped-sine fit; the FFT seed is refined by trying nearby phases and keeping the best."""
    x, y = ds.x, ds.rows[0]
    theta0 = estimation.DAMPED_SINE.initial_guess(x, y)
    best = None
    for phi in np.linspace(-math.pi, math.pi, 8, endpoint=False):
        trial = theta0.copy()
        trial[2] = phi
        res = estimation.fit(estimation.DAMPED_SINE, (x, y), trial)
        if best is None or (res.converged, -res.residual_norm) > (best.converged, -best.residual_norm):
            best = res
    return best


def fit_gaussian(ds: Dataset) -> estimation.FitResult:
    return estimation.fit(estimation.GAUSSIAN_LINE, ds)


def fit_splitting_hyperbola(ds: Dataset, geom: ElectrodeGeometry | None = None, electrode: str = "dc",
                            lambda_so: float = 4.80e9, theta0=None) -> estimation.FitResult:
    model = estimation.model_library(geom, electrode)["splitting_hyperbola"].fixing("lambda_so")
    y = ds.column("difference") if ds.y.ndim == 2 else ds.y
    if theta0 is None:
        theta0 = model.initial_guess(ds.x, y)
        theta0[0] = lambda_so
    return estimation.fit(model, (ds.x, y), theta0)
