"""Simulation and fitting toolkit for the orbital ground states of the neutral NV center."""

from ._backend import BACKEND
from .fields import ElectrodeGeometry, FieldVectorLab, FieldVectorNV
from .hamiltonian import NVParams

__version__ = "0.1.0"

__all__ = ["BACKEND", "ElectrodeGeometry", "FieldVectorLab", "FieldVectorNV", "NVParams", "__version__"]
