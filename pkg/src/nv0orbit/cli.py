"""Command-line front end: ``nv0orbit <subcommand> [options]``.

Exit status is 0 on success, 2 when the configuration, arguments or the
``validate`` checks fail, and 1 on any other runtime error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import estimation
from . import experiments as ex
from .config import PROTOCOLS, ConfigError, load_config, parse_quantity, parse_sweep_value
from .dataio import DatasetFormatError, read_dataset, write_dataset

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2

# command-line flag -> sweep key
SWEEP_FLAGS = {
    "--volts": "volts",
    "--delays": "delays",
    "--freqs": "freqs",
    "--power": "power",
    "--powers": "powers",
    "--widths": "widths",
    "--detuning": "detuning",
    "--electrode": "electrode",
    "--n-nodes": "n_nodes",
}
_VALUE_FLAGS = set(SWEEP_FLAGS) | {"--config", "--seed", "--out", "--format", "--workers", "--model",
                                   "--theta0", "--fix", "--bootstrap", "--column", "--level"}


class ValidationFailure(Exception):
    pass


def _common(parser):
    parser.add_argument("--config", default="default",
                        help="config file, or a name looked up in $NV0ORBIT_CONFIG_DIR (default: default)")
    parser.add_argument("--seed", type=int, default=None, help="enable Poisson noise with this seed")
    parser.add_argument("--out", default=None, help="output path (default: <subcommand>.<format>)")
    parser.add_argument("--format", choices=("csv", "json"), default=None)
    parser.add_argument("--workers", type=int, default=1, help="threads for sweep points")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nv0orbit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    flags = {
        "ple-scan": ["--volts", "--electrode"],
        "t1": ["--delays"],
        "oder": ["--power", "--freqs", "--n-nodes", "--electrode"],
        "splitting-map": ["--powers", "--freqs", "--n-nodes", "--electrode"],
        "rabi": ["--power", "--widths", "--electrode"],
        "ramsey": ["--detuning", "--delays", "--power", "--electrode"],
    }
    for name in PROTOCOLS:
        p = sub.add_parser(name, help=f"simulate the {name} protocol")
        _common(p)
        for flag in flags[name]:
            p.add_argument(flag, default=None, help="lo:hi:step, comma list, or value (unit suffixes allowed)")
        p.add_argument("--no-fit", action="store_true", help="skip the automatic fit")
        if name == "ramsey":
            p.add_argument("--no-phase-cycle", action="store_true")
    p = sub.add_parser("fit", help="fit a model to a dataset file")
    _common(p)
    p.add_argument("data", help="dataset CSV or JSON")
    p.add_argument("--model", required=True, choices=sorted(estimation.model_library()))
    p.add_argument("--column", default=None, help="y column label (default: first, or 'difference')")
    p.add_argument("--theta0", default=None, help="comma-separated initial parameters")
    p.add_argument("--fix", action="append", default=[], help="NAME[=VALUE] held fixed")
    p.add_argument("--electrode", default="dc", help="electrode for splitting_hyperbola")
    p.add_argument("--bootstrap", type=int, default=0, help="number of bootstrap resamples")
    p.add_argument("--level", type=float, default=0.95)
    p = sub.add_parser("validate", help="check the configuration and run the invariant suite")
    _common(p)
    return parser


def _join_negative_values(argv):
    """Turn '--volts -50:50:1' into '--volts=-50:50:1' so argparse does not read a flag."""
    out, i = [], 0
    while i < len(argv):
        tok = argv[i]
        nxt = argv[i + 1] if i + 1 < len(argv) else ""
        if tok in _VALUE_FLAGS and nxt[:1] == "-" and (nxt[1:2].isdigit() or nxt[1:2] == "."):
            out.append(f"{tok}={nxt}")
            i += 2
            continue
        out.append(tok)
        i += 1
    return out


def _override_value(protocol, key, text):
    if key == "n_nodes":
        return parse_sweep_value(protocol, key, int(text))
    if key == "electrode":
        return text
    if "," in text and ":" not in text:
        return parse_sweep_value(protocol, key, [t.strip() for t in text.split(",")])
    return parse_sweep_value(protocol, key, text)


def _settings(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError("--seed: must be a 64-bit unsigned integer")
        cfg.seed = args.seed
    if args.format:
        cfg.format = args.format
    if args.command in PROTOCOLS:
        sweep = cfg.sweeps.setdefault(args.command, {})
        for flag, key in SWEEP_FLAGS.items():
            value = getattr(args, flag[2:].replace("-", "_"), None)
            if value is not None:
                sweep[key] = _override_value(args.command, key, value)
    cfg.validate()
    return cfg


def _require(sweep, key, protocol):
    if key not in sweep:
        raise ConfigError(f"{protocol}.{key}: required (set it in the config or on the command line)")
    return sweep[key]


def _report(result: estimation.FitResult, protocol: str, derived: dict | None = None) -> str:
    payload = result.as_dict()
    payload["protocol"] = protocol
    payload["derived"] = {k: float(v) for k, v in (derived or {}).items()}
    return json.dumps(payload, indent=2, sort_keys=True, allow_nan=True) + "\n"


def run_protocol(cfg, command, workers=1, fit=True, phase_cycle=True):
    """Run one protocol; returns (datasets by suffix, fit report text or None)."""
    sw = cfg.sweep(command)
    p, geom, optics, seed = cfg.params, cfg.geometry, cfg.optics, cfg.seed
    extra = {}
    report = None
    if command == "ple-scan":
        electrode = sw.get("electrode", "dc")
        ds = ex.ple_scan(p, geom, electrode, _require(sw, "volts", command))
        if fit:
            res = ex.fit_splitting_hyperbola(ds, geom, electrode, p.lambda_so,
                                             theta0=[p.lambda_so, max(p.eps_perp, 1e6), p.d_perp or 1e3])
            report = _report(res, command)
    elif command == "t1":
        ds = ex.t1_protocol(p, _require(sw, "delays", command), optics, seed, workers)
        if fit:
            report = _report(ex.fit_t1(ds), command)
    elif command == "oder":
        ds = ex.oder_scan(p, geom, _require(sw, "power", command), _require(sw, "freqs", command),
                          pump_rate=sw.get("pump_rate", 2e7), branching_back=optics.branching_back,
                          duration=sw.get("duration", 1e-6), n_nodes=sw.get("n_nodes", 4001), seed=seed,
                          brightness=optics.brightness, electrode=sw.get("electrode", "ac"))
        if fit:
            report = _report(ex.fit_gaussian(ds), command)
    elif command == "splitting-map":
        sm = ex.splitting_map(p, geom, _require(sw, "powers", command), _require(sw, "freqs", command),
                              pump_rate=sw.get("pump_rate", 1e6), branching_back=optics.branching_back,
                              duration=sw.get("duration", 1e-6), n_nodes=sw.get("n_nodes", 4001), seed=seed,
                              brightness=optics.brightness, electrode=sw.get("electrode", "ac"), workers=workers)
        ds = sm.pl_map
        extra["splitting"] = sm.splitting
        if fit and sm.slope_fit is not None:
            report = _report(sm.slope_fit, command, {"slope_MHz_per_sqrt_uW": sm.slope * 1e-9})
    elif command == "rabi":
        ds = ex.rabi_scan(p, geom, _require(sw, "power", command), _require(sw, "widths", command), optics,
                          seed, sw.get("electrode", "ac"), workers)
        if fit:
            res = ex.fit_damped_sine(ds)
            report = _report(res, command, {"rabi_frequency_Hz": res["omega"] / (2 * math.pi),
                                            "predicted_rabi_frequency_Hz": float(ds.meta["rabi_frequency"])})
    elif command == "ramsey":
        ds = ex.ramsey_scan(p, geom, _require(sw, "detuning", command), _require(sw, "delays", command),
                            sw.get("power"), optics, sw.get("phase_cycle", True) and phase_cycle, seed,
                            sw.get("electrode", "ac"), workers)
        if fit:
            res = ex.fit_damped_sine(ds)
            report = _report(res, command, {"fringe_frequency_Hz": res["omega"] / (2 * math.pi),
                                            "T2star_s": res["T2star"]})
    else:
        raise ValueError(f"unknown protocol {command!r}")
    return {"": ds, **{f".{k}": v for k, v in extra.items()}}, report


def _output_paths(cfg, command, out):
    fmt = cfg.format
    base = Path(out or cfg.output or f"{command}.{fmt}")
    stem = base.with_suffix("") if base.suffix in (".csv", ".json") else base
    return base if base.suffix else base.with_suffix(f".{fmt}"), stem, fmt


def cmd_protocol(args) -> int:
    cfg = _settings(args)
    datasets, report = run_protocol(cfg, args.command, args.workers, not args.no_fit,
                                    not getattr(args, "no_phase_cycle", False))
    main_path, stem, fmt = _output_paths(cfg, args.command, args.out)
    for suffix, ds in datasets.items():
        path = main_path if suffix == "" else Path(f"{stem}{suffix}.{fmt}")
        write_dataset(ds, path, fmt)
        print(f"wrote {path}")
    if report is not None:
        fit_path = Path(f"{stem}.fit.json")
        fit_path.write_text(report, encoding="utf-8")
        print(f"wrote {fit_path}")
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = _settings(args)
    ds = read_dataset(args.data)
    lib = estimation.model_library(cfg.geometry, args.electrode, cfg.params.strain_axis_angle)
    model = lib[args.model]
    if args.column is not None:
        y = ds.column(args.column)
    elif "difference" in ds.y_labels:
        y = ds.column("difference")
    else:
        y = ds.rows[0]
    theta0 = None
    if args.theta0:
        theta0 = np.array([parse_quantity(t.strip(), "dimensionless", "--theta0") for t in args.theta0.split(",")])
    fixes = {}
    for item in args.fix:
        name, _, value = item.partition("=")
        fixes[name] = float(value) if value else None
    if fixes:
        model = model.fixing(*fixes)
    if theta0 is None:
        if args.model == "damped_sine":
            res = ex.fit_damped_sine(ex.Dataset(ds.x, y, ds.x_unit, ds.y_unit))
            theta0 = res.theta
        else:
            theta0 = model.initial_guess(ds.x, y)
    for name, value in fixes.items():
        if value is not None:
            theta0[model.param_names.index(name)] = value
    result = estimation.fit(model, (ds.x, y), theta0)
    if args.bootstrap:
        seed = cfg.seed if cfg.seed is not None else 0
        boot = estimation.bootstrap(model, (ds.x, y), args.bootstrap, seed, result.theta, args.level, args.workers)
        result.intervals = boot.intervals
    text = _report(result, "fit")
    out = Path(args.out or "fit.json")
    out.write_text(text, encoding="utf-8")
    print(f"wrote {out}")
    return EXIT_OK if result.converged else EXIT_RUNTIME


def invariant_suite(cfg) -> list:
    """(name, passed, detail) for a quick set of model invariants under ``cfg``."""
    from .dynamics import (DensityState, MicrowavePulse, PulseSequence, Readout, Wait, evolve,
                           gauss_hermite_nodes)
    from .fields import FieldVectorNV, electrode_field, lab_to_nv, power_to_amplitude
    from .hamiltonian import eigen_closed_form, h_strain_dc, transition_frequency
    from .linalg import hermitian_eig

    checks = []

    def check(name, fn):
        try:
            detail = fn()
            checks.append((name, True, detail or ""))
        except Exception as exc:  # each check reports its own failure
            checks.append((name, False, f"{type(exc).__name__}: {exc}"))

    p, geom = cfg.params, cfg.geometry

    def frame():
        for name in geom.electrodes:
            e = lab_to_nv(electrode_field(geom, name, 1.0), geom)
            lab = np.array(geom.electrodes[name])
            if not math.isclose(np.linalg.norm(e.as_array()), np.linalg.norm(lab), rel_tol=1e-12):
                raise AssertionError(f"frame rotation changed the norm of electrode {name}")
        return f"{len(geom.electrodes)} electrodes norm-preserving"

    def power():
        v = power_to_amplitude(geom, 1e-6)
        return f"1 uW -> {v:.6g} V"

    def closed_form():
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(200):
            e = FieldVectorNV(*rng.uniform(-1e6, 1e6, 3))
            ep, em, _ = eigen_closed_form(p, e)
            w, _ = hermitian_eig(h_strain_dc(p, e))
            scale = max(abs(ep), abs(em))
            worst = max(worst, abs(w[0] - em) / scale, abs(w[1] - ep) / scale)
        if worst > 1e-9:
            raise AssertionError(f"closed form vs Jacobi relative error {worst:.3e}")
        return f"max relative error {worst:.2e}"

    def dynamics():
        f0 = transition_frequency(p)
        seq = PulseSequence((Readout(200e-9, 1e8, 10e-9), MicrowavePulse(5e-9, 1e-4, f0), Wait(50e-9),
                             Readout(50e-9, 1e8, 10e-9)))
        rho, trace = evolve(DensityState.pure(0), seq, p, geom)
        if np.any(trace.counts_rate < 0):
            raise AssertionError("negative PL rate")
        return f"final populations {np.round(rho.populations, 6).tolist()}"

    def quadrature():
        _, w = gauss_hermite_nodes(p.optical_linewidth_fwhm, 4001)
        if abs(w.sum() - 1.0) > 1e-12:
            raise AssertionError(f"weights sum to {w.sum()!r}")
        return "weights sum to 1"

    check("frame conversion", frame)
    check("power to amplitude", power)
    check("closed form vs numeric eigenvalues", closed_form)
    check("master equation invariants", dynamics)
    check("quadrature weights", quadrature)
    return checks


def cmd_validate(args) -> int:
    cfg = _settings(args)
    results = invariant_suite(cfg)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    if not all(ok for _, ok, _ in results):
        raise ValidationFailure("invariant suite failed")
    return EXIT_OK


def main(argv=None) -> int:
    argv = _join_negative_values(list(sys.argv[1:] if argv is None else argv))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handler = {"fit": cmd_fit, "validate": cmd_validate}.get(args.command, cmd_protocol)
    try:
        return handler(args)
    except (ConfigError, DatasetFormatError, ValidationFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
