"""Ground-state orbital Hamiltonians of NV0 under spin-orbit coupling, strain and electric fields.

Everything is in cyclic frequency units (Hz); susceptibilities are in
Hz per (V/m). Orbital basis ordering is (|+>, |->) and, for the primed
strain eigenbasis, (|+'>, |-'>).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .fields import ZERO_FIELD, FieldVectorNV, effective_drive, electrode_field, lab_to_nv, power_to_amplitude
from .linalg import IDENTITY2, L_MINUS, L_PLUS, L_Z, S_Z, Basis, OperatorMatrix

DEGENERACY_GUARD = 1e-30  # Hz^2
V_PER_CM = 100.0  # V/m


class DegenerateError(ValueError):
    pass


@dataclass(frozen=True)
class NVParams:
    """Physical parameters of one NV0 center.

    ``d_perp_ac`` is the transverse susceptibility seen by the microwave
    drive; it defaults to ``d_perp``. ``resonance`` optionally pins the
    orbital transition frequency instead of deriving it from lambda and
    strain.
    """

    lambda_so: float = 4.80e9
    eps_perp: float = 4.06e9
    d_par: float = 1.08e6 / V_PER_CM
    d_perp: float = 363e3 / V_PER_CM
    T1: float = 137e-9
    Tphi: float = 1.0 / (1.0 / 30.2e-9 - 1.0 / (2 * 137e-9))
    optical_linewidth_fwhm: float = 130e6
    d_perp_ac: float | None = None
    strain_axis_angle: float = 0.0
    resonance: float | None = None
    gamma_rad: float = 1.0 / 20e-9
    optical_homogeneous_fwhm: float = 1.0 / (2 * math.pi * 20e-9)

    def __post_init__(self):
        if not self.lambda_so > 0:
            raise ValueError(f"lambda_so must be > 0, got {self.lambda_so}")
        if not self.eps_perp >= 0:
            raise ValueError(f"eps_perp must be >= 0, got {self.eps_perp}")
        if not (self.T1 > 0 and self.Tphi > 0):
            raise ValueError(f"T1 and Tphi must be > 0, got T1={self.T1}, Tphi={self.Tphi}")
        if not self.optical_linewidth_fwhm >= 0:
            raise ValueError("optical_linewidth_fwhm must be >= 0")
        if not self.gamma_rad > 0:
            raise ValueError("gamma_rad must be > 0")
        if self.resonance is not None and not self.resonance > 0:
            raise ValueError("resonance must be > 0 when given")

    @property
    def T2star(self) -> float:
        return 1.0 / (1.0 / (2.0 * self.T1) + 1.0 / self.Tphi)

    @property
    def drive_susceptibility(self) -> float:
        return self.d_perp if self.d_perp_ac is None else self.d_perp_ac

    @staticmethod
    def tphi_from_t2star(T1: float, T2star: float) -> float:
        rate = 1.0 / T2star - 1.0 / (2.0 * T1)
        if rate <= 0:
            raise ValueError(f"T2*={T2star} exceeds the lifetime limit 2*T1={2 * T1}")
        return 1.0 / rate

    @classmethod
    def with_t2star(cls, T2star: float, **kwargs) -> "NVParams":
        T1 = kwargs.get("T1", cls.T1)
        return cls(Tphi=cls.tphi_from_t2star(T1, T2star), **kwargs)

    def replace(self, **changes) -> "NVParams":
        return replace(self, **changes)


@dataclass(frozen=True)
class MixingCoefficients:
    alpha: complex
    beta: complex
    splitting: float

    @property
    def polarization(self) -> float:
        """|alpha|^2 - |beta|^2."""
        return abs(self.alpha) ** 2 - abs(self.beta) ** 2


def strain_frame_components(params: NVParams, e_nv: FieldVectorNV) -> tuple[float, float]:
    """(E_perp, E_perp') : the in-plane field along and across the strain axis."""
    c, s = math.cos(params.strain_axis_angle), math.sin(params.strain_axis_angle)
    return c * e_nv.E_x + s * e_nv.E_y, -s * e_nv.E_x + c * e_nv.E_y


def h0_full(params: NVParams) -> OperatorMatrix:
    """2 lambda Lz Sz on the orbital x spin space, ordered |+up>, |-up>, |+down>, |-down>."""
    return OperatorMatrix(2.0 * params.lambda_so * np.kron(S_Z, L_Z), Basis.PLUS_MINUS, hermitian=True)


def h_strain_dc(params: NVParams, e_nv: FieldVectorNV = ZERO_FIELD, eps_perp_prime: float = 0.0) -> OperatorMatrix:
    """Spin-up block with strain and a static field; the hydrostatic shift is dropped."""
    e_perp, e_perp_p = strain_frame_components(params, e_nv)
    x_coupling = params.eps_perp + params.d_perp * e_perp
    y_coupling = eps_perp_prime + params.d_perp * e_perp_p
    h = (
        params.lambda_so * L_Z
        + params.d_par * e_nv.E_z * IDENTITY2
        + x_coupling * (L_PLUS + L_MINUS)
        + y_coupling * (-1j * L_PLUS + 1j * L_MINUS)
    )
    return OperatorMatrix(h, Basis.PLUS_MINUS, hermitian=True)


def half_splitting(params: NVParams, e_nv: FieldVectorNV = ZERO_FIELD, eps_perp_prime: float = 0.0) -> float:
    e_perp, e_perp_p = strain_frame_components(params, e_nv)
    x = params.eps_perp + params.d_perp * e_perp
    y = eps_perp_prime + params.d_perp * e_perp_p
    return math.sqrt(params.lambda_so**2 + x * x + y * y)


def eigen_closed_form(params: NVParams, e_nv: FieldVectorNV = ZERO_FIELD, eps_perp_prime: float = 0.0):
    """Closed-form eigenvalues (E_plus, E_minus) and mixing of the strain + dc problem."""
    e_perp, e_perp_p = strain_frame_components(params, e_nv)
    x = params.eps_perp + params.d_perp * e_perp
    y = eps_perp_prime + params.d_perp * e_perp_p
    lam = params.lambda_so
    radicand = lam * lam + x * x + y * y
    if radicand < DEGENERACY_GUARD:
        raise DegenerateError("lambda, strain and transverse field all vanish; eigenvectors undefined")
    r = math.sqrt(radicand)
    shift = params.d_par * e_nv.E_z
    # (lam + r, x + iy) is the unnormalised |+'> scaled by (x + iy); its norm^2 is 2 r (r + lam)
    norm = math.sqrt(2.0 * r * (r + lam))
    alpha = complex((r + lam) / norm)
    beta = complex(x, y) / norm
    return shift + r, shift - r, MixingCoefficients(alpha, beta, 2.0 * r)


def primed_basis(mix: MixingCoefficients) -> np.ndarray:
    """Columns |+'>, |-'> expressed in the (|+>, |->) basis."""
    a, b = mix.alpha, mix.beta
    return np.array([[a, -np.conj(b)], [b, np.conj(a)]], dtype=complex)


def transition_frequency(params: NVParams) -> float:
    """Orbital resonance: the pinned value if set, else 2 sqrt(lambda^2 + eps_perp^2)."""
    if params.resonance is not None:
        return params.resonance
    return 2.0 * math.hypot(params.lambda_so, params.eps_perp)


def rabi_frequency(params: NVParams, e_drive_perp_eff: float) -> float:
    """On-resonance population oscillation frequency d_perp * E''."""
    return params.drive_susceptibility * e_drive_perp_eff


def rwa_drive(params: NVParams, e_drive_perp_eff: float, f_drive: float, phase: float = 0.0) -> OperatorMatrix:
    """Rotating-frame Hamiltonian Delta Lz + g (L+ e^{i phase} + h.c.) in the (|+'>, |-'>) basis.

    Delta is half the transition detuning so that the level separation in the
    rotating frame equals (transition - f_drive); g = d_perp E''/2 for a
    cosine drive of amplitude E''.
    """
    if not f_drive > 0:
        raise ValueError(f"drive frequency must be > 0, got {f_drive}")
    delta = 0.5 * (transition_frequency(params) - f_drive)
    g = 0.5 * rabi_frequency(params, e_drive_perp_eff)
    coupling = g * np.exp(1j * phase)
    h = delta * L_Z + coupling * L_PLUS + np.conj(coupling) * L_MINUS
    return OperatorMatrix(h, Basis.PRIMED, hermitian=True)


def drive_field(params: NVParams, geom, power: float, electrode: str = "ac") -> float:
    """E'' (V/m) produced at the NV by ``power`` watts on ``electrode``."""
    volts = power_to_amplitude(geom, power)
    e_nv = lab_to_nv(electrode_field(geom, electrode, volts), geom)
    e_perp, e_perp_p = strain_frame_components(params, e_nv)
    _, _, mix = eigen_closed_form(params)
    return effective_drive(FieldVectorNV(e_perp, e_perp_p, e_nv.E_z), mix)


def drive_rabi_frequency(params: NVParams, geom, power: float, electrode: str = "ac") -> float:
    return rabi_frequency(params, drive_field(params, geom, power, electrode))
