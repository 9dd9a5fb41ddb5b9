"""Run configuration: TOML files with unit-suffixed quantities, normalised to SI on load."""

from __future__ import annotations

import math
import os
import re
from decimal import Decimal
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .experiments import OpticalSettings
from .fields import ElectrodeGeometry, geometry_from_mapping, load_geometry, tomllib
from .hamiltonian import NVParams

CONFIG_DIR_ENV = "NV0ORBIT_CONFIG_DIR"
DATA_DIR = Path(__file__).resolve().parent / "data"


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key path."""


_FREQ = {"Hz": 1.0, "kHz": 1e3, "MHz": 1e6, "GHz": 1e9}
_TIME = {"s": 1.0, "ms": 1e-3, "us": 1e-6, "µs": 1e-6, "μs": 1e-6, "ns": 1e-9, "ps": 1e-12}
UNITS = {
    "frequency": _FREQ,
    "time": _TIME,
    "power": {"W": 1.0, "mW": 1e-3, "uW": 1e-6, "µW": 1e-6, "μW": 1e-6, "nW": 1e-9},
    "voltage": {"V": 1.0, "mV": 1e-3},
    "rate": {"/s": 1.0, "1/s": 1.0, "s^-1": 1.0, **_FREQ},
    "angle": {"rad": 1.0, "deg": math.pi / 180.0},
    "dimensionless": {},
}
_SUSC = re.compile(r"^(?P<f>[kMG]?Hz)\s*/\s*(\(\s*V\s*/\s*(?P<l1>c?m)\s*\)|\(\s*V\s+(?P<l2>c?m)\^?-1\s*\))$")
_QUANTITY = re.compile(r"^\s*(?P<num>[-+]?(\d+\.?\d*|\.\d+)([eE][-+]?\d+)?)\s*(?P<unit>.*?)\s*$")


def _unit_factor(unit: str, kind: str, where: str) -> float:
    if kind == "susceptibility":
        m = _SUSC.match(unit)
        if not m:
            raise ConfigError(f"{where}: unit {unit!r} is not a susceptibility (e.g. 'kHz/(V/cm)')")
        length = m.group("l1") or m.group("l2")
        # per V/cm is per 100 V/m
        return _FREQ[m.group("f")] / (100.0 if length == "cm" else 1.0)
    table = UNITS[kind]
    if unit not in table:
        allowed = ", ".join(table) or "none"
        raise ConfigError(f"{where}: unit {unit!r} does not match a {kind} (allowed: {allowed})")
    return table[unit]


def parse_quantity(value, kind: str, where: str = "value") -> float:
    """A number (taken as SI) or a string such as '4.80 GHz' or '961 kHz/(V/cm)'."""
    if isinstance(value, bool):
        raise ConfigError(f"{where}: expected a {kind}, got a boolean")
    if isinstance(value, (int, float)):
        out = float(value)
    elif isinstance(value, str):
        m = _QUANTITY.match(value)
        if not m:
            raise ConfigError(f"{where}: cannot parse {value!r} as a {kind}")
        unit = m.group("unit")
        factor = _unit_factor(unit, kind, where) if unit else 1.0
        # decimal product so that '4.06 GHz' is the double nearest 4.06e9
        out = float(Decimal(m.group("num")) * Decimal(repr(factor)))
    else:
        raise ConfigError(f"{where}: expected a {kind}, got {type(value).__name__}")
    if not math.isfinite(out):
        raise ConfigError(f"{where}: value must be finite")
    return out


def parse_sweep(value, kind: str, where: str = "sweep") -> np.ndarray:
    """'lo:hi:step' (inclusive of hi), a list of quantities, or a single quantity."""
    if isinstance(value, (list, tuple)):
        out = np.array([parse_quantity(v, kind, f"{where}[{i}]") for i, v in enumerate(value)])
    elif isinstance(value, str) and ":" in value:
        parts = value.split(":")
        if len(parts) != 3:
            raise ConfigError(f"{where}: range must look like lo:hi:step, got {value!r}")
        lo, hi, step = (parse_quantity(p, kind, where) for p in parts)
        if step <= 0 or hi < lo:
            raise ConfigError(f"{where}: need step > 0 and hi >= lo in {value!r}")
        n = int(math.floor((hi - lo) / step + 1e-9)) + 1
        out = lo + step * np.arange(n)
    else:
        out = np.array([parse_quantity(value, kind, where)])
    if out.size == 0:
        raise ConfigError(f"{where}: sweep is empty")
    return out


_PARAM_KINDS = {
    "lambda_so": "frequency",
    "eps_perp": "frequency",
    "d_par": "susceptibility",
    "d_perp": "susceptibility",
    "d_perp_ac": "susceptibility",
    "T1": "time",
    "Tphi": "time",
    "T2star": "time",
    "optical_linewidth_fwhm": "frequency",
    "strain_axis_angle": "angle",
    "resonance": "frequency",
    "gamma_rad": "rate",
    "optical_homogeneous_fwhm": "frequency",
}

_OPTICS_KINDS = {
    "pump_rate": "rate",
    "branching_back": "dimensionless",
    "init_duration": "time",
    "readout_duration": "time",
    "bin_width": "time",
    "brightness": "dimensionless",
}

# per protocol: key -> (kind, is_sweep); kind None means a plain value of the given python type
SWEEP_KEYS = {
    "ple-scan": {"electrode": (str, False), "volts": ("voltage", True)},
    "t1": {"delays": ("time", True)},
    "oder": {"power": ("power", False), "freqs": ("frequency", True), "pump_rate": ("rate", False),
             "duration": ("time", False), "n_nodes": (int, False), "electrode": (str, False)},
    "splitting-map": {"powers": ("power", True), "freqs": ("frequency", True), "pump_rate": ("rate", False),
                      "duration": ("time", False), "n_nodes": (int, False), "electrode": (str, False)},
    "rabi": {"power": ("power", False), "widths": ("time", True), "electrode": (str, False)},
    "ramsey": {"detuning": ("frequency", False), "delays": ("time", True), "power": ("power", False),
               "phase_cycle": (bool, False), "electrode": (str, False)},
}
PROTOCOLS = tuple(SWEEP_KEYS)
TOP_KEYS = {"seed", "params", "geometry", "optics", "output", *PROTOCOLS}


@dataclass
class RunConfig:
    params: NVParams = field(default_factory=NVParams)
    geometry: ElectrodeGeometry = field(default_factory=ElectrodeGeometry)
    optics: OpticalSettings = field(default_factory=OpticalSettings)
    sweeps: dict = field(default_factory=dict)
    seed: int | None = None
    output: str | None = None
    format: str = "csv"

    def sweep(self, protocol: str) -> dict:
        return dict(self.sweeps.get(protocol, {}))

    def validate(self) -> None:
        if self.format not in ("csv", "json"):
            raise ConfigError(f"output.format: expected 'csv' or 'json', got {self.format!r}")
        if self.seed is not None and not 0 <= self.seed < 2**64:
            raise ConfigError("seed: must be a 64-bit unsigned integer")
        for proto, sw in self.sweeps.items():
            if "electrode" in sw and sw["electrode"] not in self.geometry.electrodes:
                known = ", ".join(sorted(self.geometry.electrodes))
                raise ConfigError(f"{proto}.electrode: unknown electrode {sw['electrode']!r} (known: {known})")
            for key, val in sw.items():
                if isinstance(val, np.ndarray) and val.size == 0:
                    raise ConfigError(f"{proto}.{key}: sweep is empty")


def _check_keys(table: dict, allowed, where: str) -> None:
    for key in table:
        if key not in allowed:
            raise ConfigError(f"unknown key {where}.{key}" if where else f"unknown key {key}")


def _parse_params(table: dict) -> NVParams:
    _check_keys(table, _PARAM_KINDS, "params")
    values = {k: parse_quantity(v, _PARAM_KINDS[k], f"params.{k}") for k, v in table.items()}
    t2star = values.pop("T2star", None)
    if t2star is not None:
        if "Tphi" in values:
            raise ConfigError("params: give either Tphi or T2star, not both")
        try:
            values["Tphi"] = NVParams.tphi_from_t2star(values.get("T1", NVParams.T1), t2star)
        except ValueError as exc:
            raise ConfigError(f"params.T2star: {exc}") from None
    try:
        return NVParams(**values)
    except ValueError as exc:
        raise ConfigError(f"params: {exc}") from None


def _parse_optics(table: dict) -> OpticalSettings:
    _check_keys(table, _OPTICS_KINDS, "optics")
    return OpticalSettings(**{k: parse_quantity(v, _OPTICS_KINDS[k], f"optics.{k}") for k, v in table.items()})


def parse_sweep_value(protocol: str, key: str, value):
    kind, is_sweep = SWEEP_KEYS[protocol][key]
    where = f"{protocol}.{key}"
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true or false")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    return parse_sweep(value, kind, where) if is_sweep else parse_quantity(value, kind, where)


def config_from_mapping(data: dict, base_dir: Path | None = None) -> RunConfig:
    _check_keys(data, TOP_KEYS, "")
    cfg = RunConfig()
    if "params" in data:
        cfg.params = _parse_params(data["params"])
    if "geometry" in data:
        geo = data["geometry"]
        try:
            if isinstance(geo, str):
                path = Path(geo)
                if not path.is_absolute() and base_dir is not None:
                    path = base_dir / path
                cfg.geometry = load_geometry(path)
            else:
                cfg.geometry = geometry_from_mapping(geo)
        except (KeyError, ValueError, OSError) as exc:
            raise ConfigError(f"geometry: {exc.args[0] if exc.args else exc}") from None
    if "optics" in data:
        cfg.optics = _parse_optics(data["optics"])
    for proto in PROTOCOLS:
        if proto in data:
            _check_keys(data[proto], SWEEP_KEYS[proto], proto)
            cfg.sweeps[proto] = {k: parse_sweep_value(proto, k, v) for k, v in data[proto].items()}
    if "seed" in data:
        seed = data["seed"]
        if isinstance(seed, bool) or not isinstance(seed, int):
            raise ConfigError("seed: expected an integer")
        cfg.seed = seed
    if "output" in data:
        _check_keys(data["output"], {"path", "format"}, "output")
        cfg.output = data["output"].get("path")
        cfg.format = data["output"].get("format", "csv")
    cfg.validate()
    return cfg


def config_dir() -> Path:
    return Path(os.environ.get(CONFIG_DIR_ENV, DATA_DIR))


def resolve_config_path(name: str) -> Path:
    """A file path, or a bare name looked up as <config dir>/<name>.toml."""
    path = Path(name)
    if path.suffix == ".toml" or path.exists():
        return path
    return config_dir() / f"{name}.toml"


def load_config(name: str = "default") -> RunConfig:
    path = resolve_config_path(name)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {str(path)!r}: {exc.strerror}") from None
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_mapping(data, path.parent)
