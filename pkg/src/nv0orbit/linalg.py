"""Small dense complex matrices: Hermitian eigensolver and unitary propagators.

Hamiltonians are stored in cyclic units (Hz); the 2*pi appears only in
``propagator`` and in the master-equation right-hand side.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from ._backend import kernels

HERMITIAN_TOL = 1e-12
JACOBI_TOL = 1e-14


class Basis(str, enum.Enum):
    EXY = "EXY"
    PLUS_MINUS = "PLUS_MINUS"
    PRIMED = "PRIMED"
    LEVELS_012 = "LEVELS_012"


class NonHermitianError(ValueError):
    pass


@dataclass(frozen=True)
class OperatorMatrix:
    """A 2x2, 3x3 or 4x4 complex matrix tagged with the basis it is written in."""

    data: np.ndarray
    basis: Basis = Basis.PLUS_MINUS
    hermitian: bool = field(default=False, compare=False)

    def __post_init__(self):
        arr = np.array(self.data, dtype=complex)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] not in (2, 3, 4):
            raise ValueError(f"operator must be square with dim in {{2,3,4}}, got shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "basis", Basis(self.basis))
        if self.hermitian:
            check_hermitian(arr)

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    @property
    def entries(self) -> list[complex]:
        return [complex(z) for z in self.data.ravel()]

    @classmethod
    def from_entries(cls, entries, basis=Basis.PLUS_MINUS, hermitian=False):
        n = math.isqrt(len(entries))
        if n * n != len(entries):
            raise ValueError(f"entries length {len(entries)} is not a square")
        return cls(np.asarray(entries, dtype=complex).reshape(n, n), basis, hermitian)

    def dag(self) -> "OperatorMatrix":
        return OperatorMatrix(self.data.conj().T, self.basis)

    def __matmul__(self, other):
        if isinstance(other, OperatorMatrix):
            return OperatorMatrix(self.data @ other.data, self.basis)
        return self.data @ other

    def __add__(self, other):
        return OperatorMatrix(self.data + _raw(other), self.basis)

    def __sub__(self, other):
        return OperatorMatrix(self.data - _raw(other), self.basis)

    def __mul__(self, scalar):
        return OperatorMatrix(self.data * scalar, self.basis)

    __rmul__ = __mul__

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.data, dtype=dtype)


def _raw(m) -> np.ndarray:
    return m.data if isinstance(m, OperatorMatrix) else np.asarray(m, dtype=complex)


def max_asymmetry(m) -> float:
    a = _raw(m)
    return float(np.max(np.abs(a - a.conj().T)))


def check_hermitian(m, tol: float = HERMITIAN_TOL) -> None:
    """Raise if ``m`` deviates from its adjoint by more than ``tol`` relative to its scale."""
    a = _raw(m)
    asym = max_asymmetry(a)
    scale = max(1.0, float(np.max(np.abs(a))))
    if asym > tol * scale:
        raise NonHermitianError(
            f"matrix is not Hermitian: max |M - M^H| = {asym:.3e} (scale {scale:.3e})"
        )


def _fix_phase(v: np.ndarray) -> np.ndarray:
    # largest component of each column made real-positive, for determinism
    idx = np.argmax(np.abs(v) > np.max(np.abs(v), axis=0) * (1 - 1e-9), axis=0)
    phases = v[idx, np.arange(v.shape[1])]
    return v * (np.abs(phases) / phases)


def hermitian_eig(m) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decompose a Hermitian matrix with the cyclic Jacobi method.

    Returns ascending real eigenvalues and orthonormal eigenvectors as columns.
    """
    a = _raw(m)
    check_hermitian(a)
    a = 0.5 * (a + a.conj().T)
    w, v, _ = kernels.jacobi_eigh(a, JACOBI_TOL)
    order = np.argsort(w, kind="stable")
    return w[order], _fix_phase(v[:, order])


def eig2_closed_form(m) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form eigen-solution of a 2x2 Hermitian matrix (cross-check path)."""
    a = _raw(m)
    if a.shape != (2, 2):
        raise ValueError("eig2_closed_form needs a 2x2 matrix")
    check_hermitian(a)
    size = float(np.max(np.abs(a)))
    if size == 0.0:
        return np.zeros(2), np.eye(2, dtype=complex)
    # exact power-of-two rescale keeps tiny and huge inputs clear of under/overflow
    e = math.frexp(size)[1]
    a = np.ldexp(a.real, -e) + 1j * np.ldexp(a.imag, -e)
    p, d = a[0, 0].real, a[1, 1].real
    b = 0.5 * (a[0, 1] + np.conj(a[1, 0]))
    mean, half = 0.5 * (p + d), 0.5 * (p - d)
    r = math.hypot(half, abs(b))
    w = np.ldexp(np.array([mean - r, mean + r]), e)
    if r == 0.0:
        return w, np.eye(2, dtype=complex)
    # eigenvector of +r: (half + r, conj(b)) or (b, r - half), whichever is better conditioned
    if half >= 0:
        up = np.array([half + r, np.conj(b)])
    else:
        up = np.array([b, r - half])
    up = up / np.linalg.norm(up)
    down = np.array([-np.conj(up[1]), np.conj(up[0])])
    return w, _fix_phase(np.column_stack([down, up]))


def propagator(h, t: float) -> OperatorMatrix:
    """U = exp(-i 2 pi H t) for a Hamiltonian in Hz and a time in seconds."""
    if t < 0:
        raise ValueError(f"propagation time must be non-negative, got {t}")
    basis = h.basis if isinstance(h, OperatorMatrix) else Basis.PLUS_MINUS
    w, v = hermitian_eig(h)
    u = (v * np.exp(-2j * np.pi * w * t)) @ v.conj().T
    return OperatorMatrix(u, basis)


def is_unitary(u, tol: float = 1e-10) -> bool:
    a = _raw(u)
    return bool(np.max(np.abs(a @ a.conj().T - np.eye(a.shape[0]))) <= tol)


# orbital operators in the |+>, |-> basis (|+> first)
IDENTITY2 = np.eye(2, dtype=complex)
SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
L_Z = SIGMA_Z
L_PLUS = np.array([[0, 1], [0, 0]], dtype=complex)
L_MINUS = np.array([[0, 0], [1, 0]], dtype=complex)
S_Z = 0.5 * SIGMA_Z
