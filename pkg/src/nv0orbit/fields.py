"""Electrode geometry: voltages and microwave power to NV-frame electric fields."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib


@dataclass(frozen=True)
class FieldVectorLab:
    E_X: float
    E_Y: float
    E_Z: float

    def __post_init__(self):
        if not all(math.isfinite(c) for c in self.as_array()):
            raise ValueError(f"non-finite field component in {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.E_X, self.E_Y, self.E_Z], dtype=float)

    def __mul__(self, k: float) -> "FieldVectorLab":
        return FieldVectorLab(self.E_X * k, self.E_Y * k, self.E_Z * k)

    __rmul__ = __mul__


@dataclass(frozen=True)
class FieldVectorNV:
    E_x: float
    E_y: float
    E_z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.E_x, self.E_y, self.E_z], dtype=float)

    def __mul__(self, k: float) -> "FieldVectorNV":
        return FieldVectorNV(self.E_x * k, self.E_y * k, self.E_z * k)

    __rmul__ = __mul__


ZERO_FIELD = FieldVectorNV(0.0, 0.0, 0.0)

# per-volt FEM output for the two electrodes of the reference device, V/m
DEFAULT_ELECTRODES = {
    "dc": (12497.6, -26122.3, -7973.57),
    "ac": (13763.6, -18844.1, -1079.8),
}


@dataclass(frozen=True)
class ElectrodeGeometry:
    """Per-volt lab-frame fields of each electrode plus the NV orientation.

    ``nv_axis_sign`` selects between the two NV orientations that optical
    magnetic resonance cannot tell apart; flipping it flips the sign of the
    NV-frame field.
    """

    electrodes: dict = field(default_factory=lambda: dict(DEFAULT_ELECTRODES))
    sin_theta: float = math.sqrt(1.0 / 3.0)
    cos_theta: float = math.sqrt(2.0 / 3.0)
    line_impedance: float = 50.0
    nv_axis_sign: int = 1

    def __post_init__(self):
        if abs(self.sin_theta**2 + self.cos_theta**2 - 1.0) > 1e-12:
            raise ValueError(
                f"sin_theta^2 + cos_theta^2 = {self.sin_theta**2 + self.cos_theta**2!r}, expected 1"
            )
        if self.line_impedance <= 0:
            raise ValueError("line_impedance must be positive")
        if self.nv_axis_sign not in (1, -1):
            raise ValueError("nv_axis_sign must be +1 or -1")
        clean = {}
        for name, vec in self.electrodes.items():
            comps = tuple(float(c) for c in vec)
            if len(comps) != 3 or not all(math.isfinite(c) for c in comps):
                raise ValueError(f"electrode {name!r} needs three finite components")
            clean[str(name)] = comps
        object.__setattr__(self, "electrodes", MappingProxyType(clean))

    def __hash__(self):
        return hash((tuple(sorted(self.electrodes.items())), self.sin_theta,
                     self.cos_theta, self.line_impedance, self.nv_axis_sign))

    def __eq__(self, other):
        if not isinstance(other, ElectrodeGeometry):
            return NotImplemented
        return (dict(self.electrodes) == dict(other.electrodes)
                and (self.sin_theta, self.cos_theta, self.line_impedance, self.nv_axis_sign)
                == (other.sin_theta, other.cos_theta, other.line_impedance, other.nv_axis_sign))


def lab_to_nv(e_lab: FieldVectorLab, geom: ElectrodeGeometry) -> FieldVectorNV:
    s, c = geom.sin_theta, geom.cos_theta
    ex = e_lab.E_Y * s - e_lab.E_Z * c
    ey = e_lab.E_X
    ez = -e_lab.E_Y * c - e_lab.E_Z * s
    k = geom.nv_axis_sign
    return FieldVectorNV(k * ex, k * ey, k * ez)


def electrode_field(geom: ElectrodeGeometry, electrode: str, volts: float) -> FieldVectorLab:
    try:
        per_volt = geom.electrodes[electrode]
    except KeyError:
        known = ", ".join(sorted(geom.electrodes))
        raise KeyError(f"unknown electrode {electrode!r}; known electrodes: {known}") from None
    return FieldVectorLab(*per_volt) * float(volts)


def power_to_amplitude(geom: ElectrodeGeometry, power: float) -> float:
    """Voltage amplitude at an open-ended electrode fed with ``power`` watts.

    RMS voltage sqrt(P R), times sqrt(2) for the amplitude and 2 for the
    open-circuit reflection.
    """
    if power < 0:
        raise ValueError(f"microwave power must be non-negative, got {power}")
    return 2.0 * math.sqrt(2.0) * math.sqrt(power * geom.line_impedance)


def effective_drive(e_nv: FieldVectorNV, mix) -> float:
    """Transverse drive amplitude sqrt((|a|^2-|b|^2)^2 Ex^2 + Ey^2) in the strain eigenbasis."""
    pol = abs(mix.alpha) ** 2 - abs(mix.beta) ** 2
    return math.hypot(pol * e_nv.E_x, e_nv.E_y)


# ---------------------------------------------------------------- file format

def geometry_to_toml(geom: ElectrodeGeometry) -> str:
    """Canonical text form; ``load_geometry_text(geometry_to_toml(g)) == g``."""
    lines = [
        f"sin_theta = {geom.sin_theta!r}",
        f"cos_theta = {geom.cos_theta!r}",
        f"line_impedance = {float(geom.line_impedance)!r}",
        f"nv_axis_sign = {int(geom.nv_axis_sign)}",
        "",
        "[electrodes]",
    ]
    for name in sorted(geom.electrodes):
        comps = ", ".join(repr(float(c)) for c in geom.electrodes[name])
        lines.append(f"{_toml_key(name)} = [{comps}]")
    return "\n".join(lines) + "\n"


def _toml_key(name: str) -> str:
    if name and all(ch.isalnum() or ch in "-_" for ch in name):
        return name
    return '"' + name.replace("\\", "\\\\").replace('"', '\\"') + '"'


GEOMETRY_KEYS = {"sin_theta", "cos_theta", "line_impedance", "nv_axis_sign", "electrodes"}


def geometry_from_mapping(data: dict, where: str = "geometry") -> ElectrodeGeometry:
    unknown = set(data) - GEOMETRY_KEYS
    if unknown:
        raise KeyError(f"unknown key {where}.{sorted(unknown)[0]}")
    kwargs = {}
    for key in ("sin_theta", "cos_theta", "line_impedance"):
        if key in data:
            kwargs[key] = float(data[key])
    if "nv_axis_sign" in data:
        kwargs["nv_axis_sign"] = int(data["nv_axis_sign"])
    if "sin_theta" in kwargs and "cos_theta" not in kwargs:
        kwargs["cos_theta"] = math.sqrt(1.0 - kwargs["sin_theta"] ** 2)
    if "electrodes" in data:
        kwargs["electrodes"] = {k: tuple(v) for k, v in data["electrodes"].items()}
    return ElectrodeGeometry(**kwargs)


def load_geometry_text(text: str) -> ElectrodeGeometry:
    return geometry_from_mapping(tomllib.loads(text))


def load_geometry(path) -> ElectrodeGeometry:
    return load_geometry_text(Path(path).read_text(encoding="utf-8"))


def save_geometry(geom: ElectrodeGeometry, path) -> None:
    Path(path).write_text(geometry_to_toml(geom), encoding="utf-8")
