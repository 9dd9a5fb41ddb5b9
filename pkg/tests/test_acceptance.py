"""The ten acceptance criteria, each at its stated tolerance and runtime budget.

Every test records one PASS/FAIL line (printed, and repeated in the pytest
terminal summary) before asserting.
"""

import math
import time

import numpy as np
import pytest

from nv0orbit import dynamics
from nv0orbit.cli import EXIT_OK, main
from nv0orbit.config import DATA_DIR
from nv0orbit.dynamics import DensityState, MicrowavePulse, collapse_set, pulse_hamiltonian, trajectory
from nv0orbit.experiments import (
    fit_damped_sine,
    fit_splitting_hyperbola,
    fit_t1,
    ple_scan,
    rabi_scan,
    ramsey_scan,
    splitting_map,
    t1_protocol,
)
from nv0orbit.fields import ElectrodeGeometry, FieldVectorNV, electrode_field, lab_to_nv, power_to_amplitude
from nv0orbit.hamiltonian import (
    V_PER_CM,
    NVParams,
    drive_rabi_frequency,
    eigen_closed_form,
    h_strain_dc,
    transition_frequency,
)
from nv0orbit.linalg import hermitian_eig

NOMINAL = NVParams()

# NV-frame field per volt printed next to the lab-frame FEM values, V/m
PRINTED_NV = {"dc": (-8571.3, 12497.6, 25932.3), "ac": (-9998.0, 13763.6, 16009.6)}

# every density matrix leaving the RK4 integrator during this module, checked independently
INVARIANTS = {"segments": 0, "worst_trace": 0.0, "worst_herm": 0.0, "worst_eig": 0.0}


@pytest.fixture(scope="module", autouse=True)
def invariant_monitor():
    real = dynamics._integrate

    def checked(rho, *args, **kwargs):
        out = real(rho, *args, **kwargs)
        final = out[0]
        INVARIANTS["segments"] += 1
        INVARIANTS["worst_trace"] = max(INVARIANTS["worst_trace"], abs(np.trace(final).real - 1.0))
        INVARIANTS["worst_herm"] = max(INVARIANTS["worst_herm"], float(np.max(np.abs(final - final.conj().T))))
        low = float(np.linalg.eigvalsh(0.5 * (final + final.conj().T)).min())
        INVARIANTS["worst_eig"] = max(INVARIANTS["worst_eig"], -low)
        return out

    with pytest.MonkeyPatch.context() as mp:
        mp.setattr(dynamics, "_integrate", checked)
        yield


def timed(fn):
    start = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - start


def test_criterion_01_frame_conversion(acceptance):
    def run():
        geom = ElectrodeGeometry()
        return {name: lab_to_nv(electrode_field(geom, name, 1.0), geom).as_array() for name in PRINTED_NV}

    got, secs = timed(run)
    worst = max(abs(g / w - 1.0) for name in PRINTED_NV for g, w in zip(got[name], PRINTED_NV[name]))
    ok = worst <= 1e-3 and secs < 1.0
    acceptance(1, ok, f"worst relative deviation {worst:.2e} (tol 1e-3), {secs:.3f} s")
    assert ok


def test_criterion_02_power_arithmetic(acceptance):
    amp, secs = timed(lambda: power_to_amplitude(ElectrodeGeometry(), 1e-6))
    rms = math.sqrt(1e-6 * 50.0)
    ok = round(amp * 1e3, 1) == 20.0 and round(rms * 1e3, 1) == 7.1 and secs < 1.0
    acceptance(2, ok, f"1 uW into 50 ohm -> {amp * 1e3:.4f} mV amplitude ({rms * 1e3:.3f} mV rms), {secs:.3f} s")
    assert ok


def test_criterion_03_closed_form_vs_jacobi(acceptance):
    def run():
        rng = np.random.default_rng(2024)
        worst_eig = worst_id = 0.0
        for _ in range(1000):
            lam, eps = rng.uniform(1e6, 2e10), rng.uniform(0.0, 2e10)
            e_perp, e_z = rng.uniform(-2e6, 2e6, 2)
            p = NVParams(lambda_so=lam, eps_perp=eps)
            e = FieldVectorNV(e_perp, 0.0, e_z)
            e_plus, e_minus, mix = eigen_closed_form(p, e)
            w, _ = hermitian_eig(np.asarray(h_strain_dc(p, e)))
            scale = max(abs(e_plus), abs(e_minus))
            worst_eig = max(worst_eig, abs(w[0] - e_minus) / scale, abs(w[1] - e_plus) / scale)
            norm = abs(mix.alpha) ** 2 + abs(mix.beta) ** 2
            want = lam / math.sqrt(lam**2 + (eps + p.d_perp * e_perp) ** 2)
            worst_id = max(worst_id, abs(norm - 1.0), abs(mix.polarization - want))
        return worst_eig, worst_id

    (worst_eig, worst_id), secs = timed(run)
    ok = worst_eig <= 1e-9 and worst_id <= 1e-10 and secs < 5.0
    acceptance(3, ok, f"1000 draws: eigenvalue rel {worst_eig:.1e} (tol 1e-9), "
                      f"identities {worst_id:.1e} (tol 1e-10), {secs:.2f} s")
    assert ok


def test_criterion_04_ple_round_trip(acceptance):
    volts = np.linspace(-50, 50, 101)

    def run():
        errs = {}
        clean = ple_scan(NOMINAL, volts=volts)
        res = fit_splitting_hyperbola(clean)
        errs["noiseless"] = (res["eps_perp"] / 4.06e9 - 1, res["d_perp"] / 3630.0 - 1)
        noisy = ple_scan(NOMINAL, volts=volts)
        diff = noisy.column("difference")
        noisy.y[2] = diff * (1 + 0.01 * np.random.default_rng(7).normal(size=diff.size))
        res = fit_splitting_hyperbola(noisy)
        errs["noisy"] = (res["eps_perp"] / 4.06e9 - 1, res["d_perp"] / 3630.0 - 1)
        return errs

    errs, secs = timed(run)
    clean = max(map(abs, errs["noiseless"]))
    noisy = max(map(abs, errs["noisy"]))
    ok = clean <= 0.02 and noisy <= 0.05 and secs < 10.0
    acceptance(4, ok, f"eps_perp/d_perp worst error {clean:.2e} noiseless (tol 0.02), "
                      f"{noisy:.2e} at 1% noise (tol 0.05), {secs:.2f} s")
    assert ok


def test_criterion_05_common_mode_slope(acceptance):
    volts = np.linspace(-50, 50, 101)

    def run():
        ds = ple_scan(NOMINAL, volts=volts)
        mean = 0.5 * (ds.column("branch_0") + ds.column("branch_1"))
        return np.polyfit(volts, mean, 1)[0]

    slope, secs = timed(run)
    ok = abs(slope / 280e6 - 1) <= 0.01 and secs < 5.0
    acceptance(5, ok, f"mean-branch slope {slope / 1e6:.2f} MHz/V vs 280 (tol 1%), {secs:.2f} s")
    assert ok


def test_criterion_06_t1_round_trip(acceptance):
    delays = np.arange(0, 1000e-9 + 1e-13, 20e-9)
    res, secs = timed(lambda: fit_t1(t1_protocol(NOMINAL, delays)))
    t1 = res["T1"]
    ok = res.converged and abs(t1 / 137e-9 - 1) <= 0.02 and secs < 10.0
    acceptance(6, ok, f"fitted T1 {t1 * 1e9:.2f} ns vs 137 ns (tol 2%), {secs:.2f} s")
    assert ok


def test_criterion_07_ramsey_round_trip(acceptance):
    delays = np.arange(0, 150e-9 + 1e-13, 0.25e-9)

    def run():
        return {d: fit_damped_sine(ramsey_scan(NOMINAL, detuning=d, delays=delays)) for d in (58e6, 10e6, 120e6)}

    fits, secs = timed(run)
    freq_err = {d: abs(r["omega"] / (2 * math.pi) / d - 1) for d, r in fits.items()}
    t2_err = abs(fits[58e6]["T2star"] / 30.2e-9 - 1)
    ok = (all(r.converged for r in fits.values()) and max(freq_err.values()) <= 0.01
          and t2_err <= 0.02 and secs < 10.0)
    detail = ", ".join(f"{d / 1e6:.0f} MHz fringe err {e:.1e}" for d, e in freq_err.items())
    acceptance(7, ok, f"{detail} (tol 1%); T2* err {t2_err:.1e} (tol 2%), {secs:.2f} s")
    assert ok


def r_squared_through_origin(x, y):
    k = float(x @ y) / float(x @ x)
    resid = y - k * x
    return k, 1.0 - float(resid @ resid) / float(np.sum((y - y.mean()) ** 2))


def test_criterion_08_rabi_vs_autler_townes(acceptance):
    p = NVParams(d_perp_ac=961e3 / V_PER_CM)
    powers = np.array([10e-3, 20e-3, 50e-3, 100e-3])
    freqs = np.arange(-1.2e9, 1.2e9 + 1, 5e6)

    def run():
        sm = splitting_map(p, powers=powers, freqs=freqs, workers=4)
        rabi = []
        for power in powers:
            f_r = drive_rabi_frequency(p, ElectrodeGeometry(), power)
            ds = rabi_scan(p, power=power, widths=np.linspace(0, 4.0 / f_r, 321), workers=4)
            rabi.append(fit_damped_sine(ds)["omega"] / (2 * math.pi))
        return sm, np.array(rabi)

    (sm, rabi), secs = timed(run)
    split = sm.splitting.y
    agree = float(np.max(np.abs(rabi / split - 1))) if sm.resolved.all() else math.inf
    root = np.sqrt(powers)
    _, r2_rabi = r_squared_through_origin(root, rabi)
    _, r2_split = r_squared_through_origin(root, split)
    predicted = drive_rabi_frequency(p, ElectrodeGeometry(), 1e-6) / 1e6
    ok = (agree <= 0.03 and min(r2_rabi, r2_split) >= 0.999 and abs(predicted / 3.37 - 1) <= 0.15
          and secs < 60.0)
    acceptance(8, ok, f"Rabi vs splitting worst {agree:.2e} (tol 0.03); R^2 rabi {r2_rabi:.5f}, "
                      f"splitting {r2_split:.5f} (min 0.999); predicted slope {predicted:.3f} "
                      f"MHz/uW^1/2 vs 3.37 (tol 15%), {secs:.1f} s")
    assert ok


def test_criterion_09_dynamics_invariants(acceptance):
    p = NVParams(T1=1.0, Tphi=1.0)
    geom = ElectrodeGeometry()
    per_watt = drive_rabi_frequency(p, geom, 1.0)

    def run():
        worst = 0.0
        for delta in np.linspace(0.0, 80e6, 5):
            for f_r in np.linspace(20e6, 100e6, 5):
                pulse = MicrowavePulse(1.0, (f_r / per_watt) ** 2, transition_frequency(p) - delta)
                h = pulse_hamiltonian(p, geom, pulse)
                times, pops, _ = trajectory(DensityState.pure(0), h, collapse_set(p), 0.5e-6, 0.1e-9, level=1)
                n = 16 * pops.size
                spec = np.abs(np.fft.rfft(pops - pops.mean(), n))
                peak = np.fft.rfftfreq(n, times[1] - times[0])[np.argmax(spec)]
                worst = max(worst, abs(peak / math.hypot(delta, f_r) - 1))
        return worst

    worst, secs = timed(run)
    inv = INVARIANTS
    inv_ok = (inv["segments"] > 0 and inv["worst_trace"] <= dynamics.TRACE_TOL
              and inv["worst_herm"] <= dynamics.HERMITIAN_TOL and inv["worst_eig"] <= dynamics.POSITIVITY_TOL)
    ok = inv_ok and worst <= 0.01 and secs < 60.0
    acceptance(9, ok, f"{inv['segments']} integrated segments: trace {inv['worst_trace']:.1e}, "
                      f"hermiticity {inv['worst_herm']:.1e}, negativity {inv['worst_eig']:.1e}; "
                      f"generalized Rabi 5x5 worst {worst:.1e} (tol 1%), {secs:.1f} s")
    assert ok


DETERMINISM_CONFIG = f"""
geometry = "{(DATA_DIR / 'geometry.toml').as_posix()}"

[t1]
delays = "0 ns:1000 ns:50 ns"

[ple-scan]
volts = "-50 V:50 V:5 V"

[rabi]
power = "828 uW"
widths = "0 ns:20 ns:0.5 ns"
"""


def test_criterion_10_determinism(acceptance, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "cfg.toml").write_text(DETERMINISM_CONFIG)
    commands = ("t1", "ple-scan", "rabi")

    def run():
        codes, same = [], []
        for cmd in commands:
            for tag in ("a", "b"):
                codes.append(main([cmd, "--config", "cfg.toml", "--seed", "17", "--out", f"{cmd}-{tag}.csv"]))
            for suffix in (".csv", ".fit.json"):
                a = (tmp_path / f"{cmd}-a{suffix}").read_bytes()
                b = (tmp_path / f"{cmd}-b{suffix}").read_bytes()
                same.append(a == b)
        return codes, same

    (codes, same), secs = timed(run)
    ok = all(c == EXIT_OK for c in codes) and all(same) and secs < 5.0
    acceptance(10, ok, f"{len(commands)} subcommands rerun with seed 17: {sum(same)}/{len(same)} files "
                       f"byte-identical, {secs:.2f} s")
    assert ok
