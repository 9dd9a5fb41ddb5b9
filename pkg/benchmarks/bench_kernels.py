"""Compiled vs pure-Python kernels: Jacobi eigensolver and RK4 Lindblad stepper.

    python benchmarks/bench_kernels.py [--repeat 5] [--steps 20000]
"""

import argparse
import timeit

import numpy as np

from nv0orbit import _pykernels
from nv0orbit.dynamics import _heff_and_jumps, collapse_set, free_hamiltonian
from nv0orbit.hamiltonian import NVParams

try:
    from nv0orbit import _ckernels
except ImportError:
    _ckernels = None


def random_hermitian(rng, n):
    a = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    return 0.5 * (a + a.conj().T)


def rk4_problem():
    p = NVParams()
    heff, jumps = _heff_and_jumps(free_hamiltonian(p, 12.5e9), collapse_set(p))
    rho = np.array([[0.5, 0.5, 0], [0.5, 0.5, 0], [0, 0, 0]], dtype=complex)
    return rho, heff, np.array(jumps)


def bench(kernels, repeat, steps, mats):
    rho, heff, jumps = rk4_problem()
    jac = min(timeit.repeat(lambda: [kernels.jacobi_eigh(m, 1e-14) for m in mats], number=1, repeat=repeat))
    rk4 = min(timeit.repeat(lambda: kernels.lindblad_rk4(rho, heff, jumps, 1e-11, steps, 1, 1e-9, 1e-10, 1e-8),
                            number=1, repeat=repeat))
    return jac / len(mats), rk4 / steps


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--steps", type=int, default=20000)
    ap.add_argument("--matrices", type=int, default=2000)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    mats = [random_hermitian(rng, n) for n in (2, 3, 4) for _ in range(args.matrices // 3)]

    rows = {"python": bench(_pykernels, args.repeat, args.steps, mats)}
    if _ckernels is not None:
        rows["cython"] = bench(_ckernels, args.repeat, args.steps, mats)
    print(f"{'backend':<8} {'jacobi us/matrix':>18} {'rk4 us/step':>12}")
    for name, (jac, rk4) in rows.items():
        print(f"{name:<8} {jac * 1e6:>18.2f} {rk4 * 1e6:>12.3f}")
    if "cython" in rows:
        (pj, pr), (cj, cr) = rows["python"], rows["cython"]
        print(f"speedup  {pj / cj:>18.1f}x {pr / cr:>11.1f}x")
    else:
        print("compiled kernels not built; only the fallback was timed")


if __name__ == "__main__":
    main()
