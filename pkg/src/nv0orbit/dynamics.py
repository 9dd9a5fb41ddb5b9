"""Open-system dynamics of the three-level model |0>, |1> (orbital branches) and |2> (optically excited).

The coherent part lives in the rotating frame of the most recent microwave
pulse (initially the frame rotating at the orbital resonance, where the
free Hamiltonian vanishes). Switching frames at an absolute time ``t``
multiplies rho_10 by exp(i 2 pi (f_new - f_old) t), so Ramsey phases stay
consistent across segments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np
from scipy.linalg import expm
from scipy.special import roots_hermite

from ._backend import kernels
from .fields import ElectrodeGeometry
from .hamiltonian import NVParams, drive_field, rwa_drive, transition_frequency
from .linalg import Basis, OperatorMatrix, hermitian_eig

N_LEVELS = 3
TRACE_TOL = 1e-9
HERMITIAN_TOL = 1e-10
POSITIVITY_TOL = 1e-8
STEP_DIVISOR = 20

_trapezoid = getattr(np, "trapezoid", None) or np.trapz

_FAILURES = {
    kernels.FAIL_TRACE: "trace deviates from 1",
    kernels.FAIL_HERMITIAN: "density matrix lost hermiticity",
    kernels.FAIL_POSITIVITY: "density matrix has a negative eigenvalue",
}


class StepSizeError(ValueError):
    def __init__(self, dt, bound):
        super().__init__(f"dt={dt:.4g} s exceeds the stability bound {bound:.4g} s")
        self.dt = dt
        self.bound = bound


class IntegrationError(RuntimeError):
    def __init__(self, message, time):
        super().__init__(f"{message} at t={time:.6g} s")
        self.time = time


def _ket(i):
    v = np.zeros(N_LEVELS, dtype=complex)
    v[i] = 1.0
    return v


def _op(i, j):
    """|i><j|"""
    return np.outer(_ket(i), _ket(j))


@dataclass(frozen=True)
class DensityState:
    rho: np.ndarray

    def __post_init__(self):
        rho = np.array(self.rho, dtype=complex)
        if rho.shape != (N_LEVELS, N_LEVELS):
            raise ValueError(f"density matrix must be 3x3, got {rho.shape}")
        if np.max(np.abs(rho - rho.conj().T)) > HERMITIAN_TOL:
            raise ValueError("density matrix is not Hermitian")
        if abs(np.trace(rho) - 1.0) > TRACE_TOL:
            raise ValueError(f"density matrix trace {np.trace(rho).real!r} != 1")
        if np.linalg.eigvalsh(rho)[0] < -POSITIVITY_TOL:
            raise ValueError("density matrix is not positive semidefinite")
        rho.setflags(write=False)
        object.__setattr__(self, "rho", rho)

    @classmethod
    def pure(cls, level: int) -> "DensityState":
        return cls(_op(level, level))

    @classmethod
    def mixture(cls, p0: float, p1: float, p2: float = 0.0) -> "DensityState":
        return cls(np.diag([p0, p1, p2]).astype(complex))

    def population(self, level: int) -> float:
        return float(self.rho[level, level].real)

    @property
    def populations(self) -> np.ndarray:
        return np.real(np.diag(self.rho)).copy()


@dataclass(frozen=True)
class OpticalPump:
    """Laser on the |0> -> |2> line; PL is binned over ``bin_width`` (whole pulse if None)."""

    duration: float
    pump_rate: float
    branching_back: float = 0.5
    bin_width: float | None = None


@dataclass(frozen=True)
class Readout:
    duration: float
    pump_rate: float
    bin_width: float
    branching_back: float = 0.5


@dataclass(frozen=True)
class MicrowavePulse:
    duration: float
    power: float
    frequency: float
    phase: float = 0.0
    electrode: str = "ac"


@dataclass(frozen=True)
class Wait:
    duration: float


Segment = Union[OpticalPump, Readout, MicrowavePulse, Wait]


@dataclass(frozen=True)
class PulseSequence:
    segments: tuple = ()

    def __post_init__(self):
        segs = tuple(self.segments)
        for k, seg in enumerate(segs):
            if not isinstance(seg, (OpticalPump, Readout, MicrowavePulse, Wait)):
                raise TypeError(f"segment {k} has unsupported type {type(seg).__name__}")
            if not seg.duration >= 0:
                raise ValueError(f"segment {k}: negative duration {seg.duration}")
            if isinstance(seg, (OpticalPump, Readout)):
                if not 0.0 <= seg.branching_back <= 1.0:
                    raise ValueError(f"segment {k}: branching_back must lie in [0, 1]")
                if seg.pump_rate < 0:
                    raise ValueError(f"segment {k}: negative pump_rate")
                if seg.bin_width is not None and not seg.bin_width > 0:
                    raise ValueError(f"segment {k}: bin_width must be > 0")
            if isinstance(seg, MicrowavePulse):
                if seg.power < 0 or not seg.frequency > 0:
                    raise ValueError(f"segment {k}: need power >= 0 and frequency > 0")
        object.__setattr__(self, "segments", segs)

    @property
    def duration(self) -> float:
        return sum(s.duration for s in self.segments)

    def __add__(self, other: "PulseSequence") -> "PulseSequence":
        return PulseSequence(self.segments + other.segments)


@dataclass(frozen=True)
class PLTrace:
    bin_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    counts_rate: np.ndarray = field(default_factory=lambda: np.zeros(0))
    segment: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def first_bin(self, segment_index: int) -> float:
        hits = np.flatnonzero(self.segment == segment_index)
        if hits.size == 0:
            raise KeyError(f"no PL bins recorded for segment {segment_index}")
        return float(self.counts_rate[hits[0]])


# ------------------------------------------------------------ generators

def collapse_set(params: NVParams, optical: OpticalPump | Readout | None = None,
                 branching_back: float = 0.5) -> list:
    """Jump operators with their rates (1/s).

    Orbital decay |1> -> |0> at 1/T1 and pure dephasing diag(1,-1,0)/sqrt(2)
    at 1/Tphi, which together damp rho_01 at 1/(2 T1) + 1/Tphi. The excited
    level always decays back to |0> and |1>; the branching comes from the
    laser segment when there is one, else from ``branching_back``. A laser
    adds incoherent |0> -> |2> pumping.
    """
    b = optical.branching_back if optical is not None else branching_back
    ops = [
        (_op(0, 1), 1.0 / params.T1),
        (np.diag([1.0, -1.0, 0.0]).astype(complex) / math.sqrt(2.0), 1.0 / params.Tphi),
        (_op(0, 2), params.gamma_rad * b),
        (_op(1, 2), params.gamma_rad * (1.0 - b)),
    ]
    if optical is not None:
        ops.append((_op(2, 0), optical.pump_rate))
    return [(op, rate) for op, rate in ops if rate > 0]


def embed_ground(h2: OperatorMatrix) -> np.ndarray:
    """Place a primed-basis 2x2 Hamiltonian on levels |0> = |-'>, |1> = |+'>."""
    h = np.zeros((N_LEVELS, N_LEVELS), dtype=complex)
    a = np.asarray(h2, dtype=complex)
    h[0, 0], h[1, 1] = a[1, 1], a[0, 0]
    h[0, 1], h[1, 0] = a[1, 0], a[0, 1]
    return h


def free_hamiltonian(params: NVParams, frame: float) -> np.ndarray:
    """Zero-drive Hamiltonian in a frame rotating at ``frame`` Hz."""
    delta = 0.5 * (transition_frequency(params) - frame)
    return np.diag([-delta, delta, 0.0]).astype(complex)


def pulse_hamiltonian(params: NVParams, geom: ElectrodeGeometry, pulse: MicrowavePulse) -> np.ndarray:
    e_eff = drive_field(params, geom, pulse.power, pulse.electrode) if pulse.power > 0 else 0.0
    return embed_ground(rwa_drive(params, e_eff, pulse.frequency, pulse.phase))


def _heff_and_jumps(h: np.ndarray, collapse: list):
    jumps = np.array([math.sqrt(rate) * op for op, rate in collapse], dtype=complex).reshape(-1, N_LEVELS, N_LEVELS)
    m = sum((j.conj().T @ j for j in jumps), np.zeros((N_LEVELS, N_LEVELS), dtype=complex))
    return 2.0 * np.pi * h - 0.5j * m, jumps


def lindblad_rhs(rho: np.ndarray, h: np.ndarray, collapse: list) -> np.ndarray:
    """d rho/dt for a Hamiltonian in Hz and (operator, rate) jumps."""
    out = -2j * np.pi * (h @ rho - rho @ h)
    for op, rate in collapse:
        opd = op.conj().T
        out += rate * (op @ rho @ opd - 0.5 * (opd @ op @ rho + rho @ opd @ op))
    return out


def step_bound(params: NVParams, h: np.ndarray, collapse: list) -> float:
    """Largest admissible RK4 step: the shortest time scale over STEP_DIVISOR."""
    scales = [params.T1, params.Tphi]
    w = np.linalg.eigvalsh(h)
    spread = float(w[-1] - w[0])
    if spread > 0:
        scales.append(1.0 / spread)
    scales += [1.0 / rate for _, rate in collapse if rate > 0]
    return min(scales) / STEP_DIVISOR


def _segment_setup(seg, params, geom, frame, branching_back):
    if isinstance(seg, MicrowavePulse):
        return pulse_hamiltonian(params, geom, seg), collapse_set(params, None, branching_back), seg.frequency
    optical = seg if isinstance(seg, (OpticalPump, Readout)) else None
    return free_hamiltonian(params, frame), collapse_set(params, optical, branching_back), frame


def _change_frame(rho: np.ndarray, old: float, new: float, t: float) -> np.ndarray:
    if new == old:
        return rho
    phase = np.exp(2j * np.pi * (new - old) * t)
    rho = rho.copy()
    rho[1, 0] *= phase
    rho[0, 1] *= np.conj(phase)
    return rho


def _integrate(rho, heff, jumps, dt_max, duration, t0, level=2):
    """RK4 over ``duration`` with steps <= dt_max; returns (rho, times, pops)."""
    if duration == 0:
        return rho, np.array([t0]), np.array([rho[level, level].real])
    n = max(1, math.ceil(duration / dt_max - 1e-9))
    h = duration / n
    rho, pops, fail_step, code = kernels.lindblad_rk4(
        rho, heff, jumps, h, n, level, TRACE_TOL, HERMITIAN_TOL, POSITIVITY_TOL
    )
    if fail_step >= 0:
        raise IntegrationError(_FAILURES.get(code, "invariant breach"), t0 + fail_step * h)
    return rho, t0 + h * np.arange(n + 1), pops


def evolve(rho0: DensityState, seq: PulseSequence, params: NVParams,
           geom: ElectrodeGeometry | None = None, dt: float | None = None,
           frame: float | None = None):
    """Integrate the master equation through ``seq``.

    ``dt`` is validated against the bound of every segment; when omitted each
    segment uses its own bound. Returns (final DensityState, PLTrace).
    """
    geom = geom or ElectrodeGeometry()
    frame = transition_frequency(params) if frame is None else frame
    current = frame
    setups = []
    branching = 0.5
    for seg in seq.segments:
        if isinstance(seg, (OpticalPump, Readout)):
            branching = seg.branching_back
        h, collapse, seg_frame = _segment_setup(seg, params, geom, frame, branching)
        setups.append((h, collapse, seg_frame))
        frame = seg_frame
    bounds = [step_bound(params, h, c) for h, c, _ in setups]
    if dt is not None:
        if not dt > 0:
            raise ValueError("dt must be positive")
        worst = min(bounds, default=math.inf)
        if dt > worst * (1 + 1e-12):
            raise StepSizeError(dt, worst)

    rho = np.array(rho0.rho, dtype=complex)
    t = 0.0
    times, rates, owners = [], [], []
    for k, (seg, (h, collapse, seg_frame), bound) in enumerate(zip(seq.segments, setups, bounds)):
        rho = _change_frame(rho, current, seg_frame, t)
        current = seg_frame
        heff, jumps = _heff_and_jumps(h, collapse)
        dt_max = bound if dt is None else dt
        if isinstance(seg, (OpticalPump, Readout)):
            width = seg.bin_width or seg.duration
            nbins = max(1, math.ceil(seg.duration / width - 1e-9)) if seg.duration > 0 else 0
            for b in range(nbins):
                span = min(width, seg.duration - b * width)
                rho, ts, pops = _integrate(rho, heff, jumps, min(dt_max, span), span, t)
                mean_pop = _trapezoid(pops, ts) / span if span > 0 else pops[0]
                times.append(t)
                rates.append(params.gamma_rad * mean_pop)
                owners.append(k)
                t += span
        else:
            rho, _, _ = _integrate(rho, heff, jumps, dt_max, seg.duration, t)
            t += seg.duration
    rho = 0.5 * (rho + rho.conj().T)
    trace = PLTrace(np.array(times), np.array(rates), np.array(owners, dtype=int))
    return DensityState(rho), trace


def trajectory(rho0: DensityState, h: np.ndarray, collapse: list, duration: float,
               dt: float, level: int = 1):
    """Population of ``level`` sampled every ``dt`` under a constant generator.

    Returns (times, populations, final DensityState).
    """
    heff, jumps = _heff_and_jumps(np.asarray(h, dtype=complex), collapse)
    rho, times, pops = _integrate(np.array(rho0.rho, dtype=complex), heff, jumps, dt, duration, 0.0, level)
    return times, pops, DensityState(0.5 * (rho + rho.conj().T))


# ------------------------------------------------------- exact constant-generator path

def liouvillian(h: np.ndarray, collapse: list) -> np.ndarray:
    """Superoperator acting on row-major vec(rho)."""
    n = h.shape[0]
    eye = np.eye(n)
    sup = -2j * np.pi * (np.kron(h, eye) - np.kron(eye, h.T))
    for op, rate in collapse:
        opd_op = op.conj().T @ op
        sup += rate * (np.kron(op, op.conj()) - 0.5 * np.kron(opd_op, eye) - 0.5 * np.kron(eye, opd_op.T))
    return sup


def propagate_exact(sup: np.ndarray, rho: np.ndarray, duration: float):
    """Return (rho(T), integral of rho over [0, T]) for a constant generator.

    ``sup`` may carry leading batch dimensions; ``rho`` is then broadcast.
    Uses the block-exponential of [[L, I], [0, 0]].
    """
    sup = np.asarray(sup)
    d = sup.shape[-1]
    block = np.zeros(sup.shape[:-2] + (2 * d, 2 * d), dtype=complex)
    block[..., :d, :d] = sup * duration
    block[..., :d, d:] = np.eye(d) * duration
    big = expm(block)
    vec = np.asarray(rho, dtype=complex).reshape(-1)
    final = big[..., :d, :d] @ vec
    integral = big[..., :d, d:] @ vec
    n = int(round(math.sqrt(d)))
    return final.reshape(sup.shape[:-2] + (n, n)), integral.reshape(sup.shape[:-2] + (n, n))


def dressed_states(h: np.ndarray):
    """Eigenstates of the driven ground block with their optical resonances and pump weights.

    Returns (nu, weight, kets): nu_d = -(E_d - H_00) is the laser detuning,
    relative to the bare |0> -> |2> line, at which dressed state d is
    resonant; weight is |<0|d>|^2; kets are 3-vectors.
    """
    ground = OperatorMatrix(h[:2, :2], Basis.LEVELS_012)
    energies, vecs = hermitian_eig(ground)
    kets = np.zeros((2, N_LEVELS), dtype=complex)
    kets[:, :2] = vecs.T
    return -(energies - h[0, 0].real), np.abs(vecs[0, :]) ** 2, kets


def lorentzian(detuning, fwhm: float):
    """Peak-normalised Lorentzian; a delta function when fwhm is 0."""
    detuning = np.asarray(detuning, dtype=float)
    if fwhm == 0:
        return (detuning == 0).astype(float)
    half = 0.5 * fwhm
    return half * half / (detuning**2 + half * half)


def dressed_pump_collapse(h: np.ndarray, pump_rate: float, laser_detuning: float,
                          linewidth_fwhm: float) -> list:
    """Pump channels for a weak laser probing the drive-dressed ground states.

    Each dressed eigenstate |d> is excited at
    pump_rate * |<0|d>|^2 * L(laser_detuning - nu_d) with L a peak-normalised
    Lorentzian of the given FWHM.
    """
    nus, weights, kets = dressed_states(h)
    out = []
    for nu_d, weight, ket in zip(nus, weights, kets):
        rate = pump_rate * weight * float(lorentzian(laser_detuning - nu_d, linewidth_fwhm))
        if rate > 0:
            out.append((np.outer(_ket(2), ket.conj()), rate))
    return out


# ------------------------------------------------------- inhomogeneous broadening

def gauss_hermite_nodes(fwhm: float, n_nodes: int):
    """Offsets and normalised weights for averaging over a Gaussian of the given FWHM."""
    if n_nodes < 3 or n_nodes % 2 == 0:
        raise ValueError(f"n_nodes must be odd and >= 3, got {n_nodes}")
    x, w = roots_hermite(n_nodes)
    sigma = fwhm / math.sqrt(8.0 * math.log(2.0))
    w = w / w.sum()
    x[n_nodes // 2] = 0.0
    return math.sqrt(2.0) * sigma * x, w


def inhomogeneous_average(run: Callable[[float], np.ndarray], fwhm: float, n_nodes: int = 4001):
    """Average ``run(offset)`` over a Gaussian distribution of detuning offsets."""
    offsets, weights = gauss_hermite_nodes(fwhm, n_nodes)
    if fwhm == 0:
        return np.asarray(run(0.0), dtype=float)
    total = None
    for off, w in zip(offsets, weights):
        val = w * np.asarray(run(float(off)), dtype=float)
        total = val if total is None else total + val
    return total


def averaged_over_offsets(values_at: Callable[[np.ndarray], np.ndarray], fwhm: float, n_nodes: int = 4001):
    """Vectorised variant: ``values_at(offsets)`` returns one row per offset."""
    offsets, weights = gauss_hermite_nodes(fwhm, n_nodes)
    if fwhm == 0:
        return np.asarray(values_at(np.zeros(1)), dtype=float)[0]
    return weights @ np.asarray(values_at(offsets), dtype=float)


def run_concurrently(fn: Callable, items: Sequence, workers: int = 1) -> list:
    """Map ``fn`` over ``items`` preserving input order."""
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
