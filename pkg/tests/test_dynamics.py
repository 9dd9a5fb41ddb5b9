import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nv0orbit.dynamics import (
    DensityState,
    IntegrationError,
    MicrowavePulse,
    OpticalPump,
    PulseSequence,
    Readout,
    StepSizeError,
    Wait,
    averaged_over_offsets,
    collapse_set,
    dressed_pump_collapse,
    dressed_states,
    evolve,
    gauss_hermite_nodes,
    inhomogeneous_average,
    lindblad_rhs,
    liouvillian,
    propagate_exact,
    pulse_hamiltonian,
    run_concurrently,
    step_bound,
    trajectory,
)
from nv0orbit.estimation import GAUSSIAN_LINE, fit
from nv0orbit.fields import ElectrodeGeometry
from nv0orbit.hamiltonian import NVParams, drive_rabi_frequency, transition_frequency

SLOW_DECAY = dict(T1=1.0, Tphi=1.0)


def power_for_rabi(p, f_r):
    return (f_r / drive_rabi_frequency(p, ElectrodeGeometry(), 1.0)) ** 2


def test_collapse_rates():
    ops = collapse_set(NVParams())
    rates = sorted(r for _, r in ops)
    assert 1 / 137e-9 == pytest.approx(7.30e6, rel=1e-3)
    assert 1 / 137e-9 in rates
    assert 1 / NVParams().Tphi in rates


def test_density_state_validation():
    with pytest.raises(ValueError):
        DensityState(np.diag([0.5, 0.6, 0.0]))
    with pytest.raises(ValueError):
        DensityState(np.diag([1.2, -0.2, 0.0]))
    with pytest.raises(ValueError):
        DensityState(np.array([[0.5, 0.1], [0.1, 0.5]]))
    assert DensityState.mixture(0.25, 0.75).population(1) == 0.75


def test_sequence_validation():
    with pytest.raises(ValueError):
        PulseSequence((Wait(-1.0),))
    with pytest.raises(ValueError):
        PulseSequence((OpticalPump(1e-6, 1e8, branching_back=1.5),))
    with pytest.raises(ValueError):
        PulseSequence((Readout(1e-6, 1e8, bin_width=0.0),))
    with pytest.raises(TypeError):
        PulseSequence(("wait",))


def test_empty_sequence_is_identity():
    rho0 = DensityState.mixture(0.3, 0.7)
    rho, trace = evolve(rho0, PulseSequence(), NVParams())
    assert np.array_equal(rho.rho, rho0.rho)
    assert trace.counts_rate.size == 0


def test_t1_decay_closed_form():
    rho, _ = evolve(DensityState.pure(1), PulseSequence((Wait(600e-9),)), NVParams())
    assert rho.population(0) == pytest.approx(1 - math.exp(-600 / 137), abs=1e-8)
    assert rho.population(0) == pytest.approx(0.9875, abs=1e-4)


@pytest.mark.parametrize("f_r,width", [(87.8e6, 5.7e-9), (100e6, 5e-9), (100e6, 2.1e-9)])
def test_resonant_rabi_transfer(f_r, width):
    # sin^2(pi f_R t); the bound-limited step carries RK4 error ~ (2 pi f_R dt)^4
    p = NVParams(**SLOW_DECAY)
    seq = PulseSequence((MicrowavePulse(width, power_for_rabi(p, f_r), transition_frequency(p)),))
    want = math.sin(math.pi * f_r * width) ** 2
    rho, _ = evolve(DensityState.pure(0), seq, p)
    assert rho.population(1) == pytest.approx(want, abs=1e-4)
    rho, _ = evolve(DensityState.pure(0), seq, p, dt=1e-12)
    assert rho.population(1) == pytest.approx(want, abs=1e-8)


def test_free_induction_decay_lifetime_limited():
    p = NVParams(T1=137e-9, Tphi=1e3)
    plus = np.array([1, 1, 0], dtype=complex) / math.sqrt(2)
    rho0 = DensityState(np.outer(plus, plus.conj()))
    for t in (50e-9, 150e-9, 300e-9):
        rho, _ = evolve(rho0, PulseSequence((Wait(t),)), p)
        assert abs(rho.rho[0, 1]) / 0.5 == pytest.approx(math.exp(-t / (2 * 137e-9)), rel=0.01)


def test_free_induction_decay_matches_t2star():
    p = NVParams()
    plus = np.array([1, 1, 0], dtype=complex) / math.sqrt(2)
    rho0 = DensityState(np.outer(plus, plus.conj()))
    rho, _ = evolve(rho0, PulseSequence((Wait(40e-9),)), p)
    assert abs(rho.rho[0, 1]) / 0.5 == pytest.approx(math.exp(-40e-9 / p.T2star), rel=1e-6)


def test_step_size_guard():
    p = NVParams()
    seq = PulseSequence((Wait(100e-9),))
    bound = step_bound(p, np.zeros((3, 3)), collapse_set(p))
    with pytest.raises(StepSizeError) as info:
        evolve(DensityState.pure(1), seq, p, dt=2 * bound)
    assert info.value.bound == pytest.approx(bound)
    rho, _ = evolve(DensityState.pure(1), seq, p, dt=bound)
    assert rho.population(0) == pytest.approx(1 - math.exp(-100 / 137), abs=1e-8)


def test_integration_error_reports_time(monkeypatch):
    from nv0orbit import dynamics

    def broken(rho, heff, jumps, dt, n, level, *tol):
        return rho, np.zeros(4), 3, dynamics.kernels.FAIL_POSITIVITY

    monkeypatch.setattr(dynamics.kernels, "lindblad_rk4", broken)
    with pytest.raises(IntegrationError, match="negative eigenvalue") as info:
        evolve(DensityState.pure(1), PulseSequence((Wait(10e-9),)), NVParams(), dt=1e-9)
    assert info.value.time == pytest.approx(3e-9)


def test_invariants_over_long_sequence():
    p = NVParams()
    f0 = transition_frequency(p)
    seq = PulseSequence((OpticalPump(2e-6, 1e8, bin_width=50e-9), MicrowavePulse(20e-9, 1e-3, f0 - 30e6),
                         Wait(3e-6), MicrowavePulse(7e-9, 5e-4, f0, math.pi / 2),
                         Readout(4e-6, 5e7, 100e-9, 0.3)))
    assert seq.duration <= 10e-6
    rho, trace = evolve(DensityState.pure(0), seq, p)
    assert abs(np.trace(rho.rho) - 1) < 1e-9
    assert np.linalg.eigvalsh(rho.rho)[0] >= -1e-8
    assert np.all(trace.counts_rate >= 0)
    assert trace.bin_times.size == trace.counts_rate.size == 40 + 40


def test_pl_bins_follow_excited_population():
    p = NVParams()
    seq = PulseSequence((Readout(100e-9, 1e8, 10e-9),))
    _, trace = evolve(DensityState.pure(0), seq, p)
    assert trace.first_bin(0) > 0
    assert np.allclose(np.diff(trace.bin_times), 10e-9)
    with pytest.raises(KeyError):
        trace.first_bin(3)


def test_rk4_matches_exact_propagation():
    # the fixed-step integrator and the matrix-exponential route agree
    p = NVParams()
    geom = ElectrodeGeometry()
    pulse = MicrowavePulse(30e-9, 2e-4, transition_frequency(p) - 20e6)
    h = pulse_hamiltonian(p, geom, pulse)
    collapse = collapse_set(p)
    rho0 = DensityState.mixture(0.6, 0.3, 0.1)
    rho_exact, _ = propagate_exact(liouvillian(h, collapse), rho0.rho, 30e-9)
    rho_rk4, _ = evolve(rho0, PulseSequence((pulse,)), p, geom, frame=pulse.frequency)
    assert np.allclose(rho_rk4.rho, rho_exact, atol=1e-4)
    rho_rk4, _ = evolve(rho0, PulseSequence((pulse,)), p, geom, dt=5e-12, frame=pulse.frequency)
    assert np.allclose(rho_rk4.rho, rho_exact, atol=1e-10)


def test_liouvillian_matches_reference_rhs():
    rng = np.random.default_rng(3)
    m = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
    h = 0.5 * (m + m.conj().T)
    collapse = collapse_set(NVParams(), Readout(1e-6, 3e7, 1e-7))
    rho = DensityState.mixture(0.2, 0.5, 0.3).rho
    lhs = (liouvillian(h, collapse) @ rho.reshape(-1)).reshape(3, 3)
    assert np.allclose(lhs, lindblad_rhs(rho, h, collapse))


def test_exact_integral_of_decay():
    # integral of rho_11 under pure decay: T1 (1 - exp(-T/T1))
    p = NVParams(Tphi=1.0)
    sup = liouvillian(np.zeros((3, 3), dtype=complex), collapse_set(p))
    final, integral = propagate_exact(sup, DensityState.pure(1).rho, 300e-9)
    assert final[1, 1].real == pytest.approx(math.exp(-300 / 137), rel=1e-10)
    assert integral[1, 1].real == pytest.approx(137e-9 * (1 - math.exp(-300 / 137)), rel=1e-10)


@pytest.mark.parametrize("delta,f_r", [(0.0, 40e6), (30e6, 40e6), (80e6, 20e6)])
def test_generalized_rabi_frequency(delta, f_r):
    p = NVParams(**SLOW_DECAY)
    geom = ElectrodeGeometry()
    pulse = MicrowavePulse(1.0, power_for_rabi(p, f_r), transition_frequency(p) - delta)
    h = pulse_hamiltonian(p, geom, pulse)
    times, pops, _ = trajectory(DensityState.pure(0), h, collapse_set(p), 1e-6, 0.1e-9, level=1)
    spec = np.abs(np.fft.rfft(pops - pops.mean(), 16 * pops.size))
    freqs = np.fft.rfftfreq(16 * pops.size, times[1] - times[0])
    assert freqs[np.argmax(spec)] == pytest.approx(math.hypot(delta, f_r), rel=0.01)


def test_dressed_states_split_by_rabi_frequency():
    h = np.zeros((3, 3), dtype=complex)
    h[0, 1] = h[1, 0] = 50e6
    nus, weights, _ = dressed_states(h)
    assert abs(nus[0] - nus[1]) == pytest.approx(100e6)
    assert weights == pytest.approx([0.5, 0.5])
    chans = dressed_pump_collapse(h, 1e6, 50e6, 8e6)
    assert max(r for _, r in chans) == pytest.approx(0.5e6)


def test_gauss_hermite_nodes():
    x, w = gauss_hermite_nodes(130e6, 4001)
    assert abs(w.sum() - 1.0) < 1e-12
    assert x[2000] == 0.0
    sigma = 130e6 / math.sqrt(8 * math.log(2))
    assert math.sqrt(np.sum(w * x**2)) == pytest.approx(sigma, rel=1e-10)
    for bad in (2, 4000, 1):
        with pytest.raises(ValueError):
            gauss_hermite_nodes(1.0, bad)


def test_inhomogeneous_average_trivial_cases():
    def run(offset):
        return np.array([1.0 + offset, 2.0])

    assert np.array_equal(inhomogeneous_average(run, 0.0, 5), run(0.0))
    assert inhomogeneous_average(lambda o: np.array([3.0]), 1e6, 101) == pytest.approx([3.0])
    vec = averaged_over_offsets(lambda o: np.ones((o.size, 4)) * 2.0, 1e6, 101)
    assert vec == pytest.approx(np.full(4, 2.0))


def test_narrow_line_probe_recovers_gaussian_width():
    # a 1 MHz Lorentzian line spread by a 130 MHz Gaussian, probed by a weak laser
    probe = np.linspace(-400e6, 400e6, 321)

    def line(offsets):
        return 1.0 / (1.0 + ((probe[None, :] - offsets[:, None]) / 0.5e6) ** 2)

    spectrum = averaged_over_offsets(line, 130e6, 4001)
    res = fit(GAUSSIAN_LINE, (probe, spectrum))
    assert res["fwhm"] == pytest.approx(130e6, rel=0.02)


def test_run_concurrently_preserves_order():
    items = list(range(20))
    assert run_concurrently(lambda k: k * k, items, workers=4) == [k * k for k in items]


@given(st.floats(0.0, 1.0), st.floats(0.0, 300e-9))
def test_wait_preserves_state_invariants(p1, t):
    rho, _ = evolve(DensityState.mixture(1 - p1, p1), PulseSequence((Wait(t),)), NVParams())
    assert abs(np.trace(rho.rho) - 1) < 1e-9
    assert rho.population(1) == pytest.approx(p1 * math.exp(-t / 137e-9), abs=1e-9)
