"""Pure-Python/numpy versions of the hot kernels.

Mirrors ``_ckernels.pyx`` function for function; used when the compiled
extension is unavailable or ``NV0ORBIT_PURE_PYTHON`` is set.
"""

import math

import numpy as np

MAX_SWEEPS = 60

# invariant failure codes shared with the compiled kernel
OK = 0
FAIL_TRACE = 1
FAIL_HERMITIAN = 2
FAIL_POSITIVITY = 3


def jacobi_eigh(a, tol):
    """Cyclic complex Jacobi diagonalisation of a small Hermitian matrix.

    Returns (diagonal, V, sweeps) with ``V^H a V = diag`` (unsorted).
    Sweeps stop once the off-diagonal Frobenius norm is below
    ``tol * ||a||_F``.
    """
    a = np.array(a, dtype=complex)
    n = a.shape[0]
    v = np.eye(n, dtype=complex)
    fro = math.sqrt(float(np.sum(np.abs(a) ** 2)))
    sweeps = 0
    for sweeps in range(1, MAX_SWEEPS + 1):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                off += abs(a[p, q]) ** 2
        if math.sqrt(2.0 * off) <= tol * fro:
            sweeps -= 1
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                r = abs(apq)
                if r == 0.0:
                    continue
                phase = apq / r
                theta = (a[q, q].real - a[p, p].real) / (2.0 * r)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                elif theta >= 0.0:
                    t = 1.0 / (theta + math.sqrt(theta * theta + 1.0))
                else:
                    t = -1.0 / (-theta + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                ph = phase.conjugate()
                g_pp, g_pq = c, s
                g_qp, g_qq = -s * ph, c * ph
                colp = a[:, p].copy()
                colq = a[:, q]
                a[:, p] = colp * g_pp + colq * g_qp
                a[:, q] = colp * g_pq + colq * g_qq
                rowp = a[p, :].copy()
                rowq = a[q, :]
                a[p, :] = np.conj(g_pp) * rowp + np.conj(g_qp) * rowq
                a[q, :] = np.conj(g_pq) * rowp + np.conj(g_qq) * rowq
                a[p, q] = 0.0
                a[q, p] = 0.0
                a[p, p] = a[p, p].real
                a[q, q] = a[q, q].real
                vp = v[:, p].copy()
                vq = v[:, q]
                v[:, p] = vp * g_pp + vq * g_qp
                v[:, q] = vp * g_pq + vq * g_qq
    return np.real(np.diag(a)).copy(), v, sweeps


def _rhs(rho, heff, heff_h, jumps, jumps_h):
    out = -1j * (heff @ rho - rho @ heff_h)
    for j, jh in zip(jumps, jumps_h):
        out += j @ rho @ jh
    return out


def _check(rho, tol_trace, tol_herm, tol_pos):
    if abs(np.trace(rho) - 1.0) > tol_trace:
        return FAIL_TRACE
    if np.max(np.abs(rho - rho.conj().T)) > tol_herm:
        return FAIL_HERMITIAN
    if np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))[0] < -tol_pos:
        return FAIL_POSITIVITY
    return OK


def lindblad_rk4(rho0, heff, jumps, dt, nsteps, level,
                 tol_trace, tol_herm, tol_pos):
    """Fixed-step RK4 for d rho/dt = -i(Heff rho - rho Heff^H) + sum J rho J^H.

    ``heff`` already carries the 2*pi factor and the -i/2 sum of J^H J.
    Returns (rho, pops, fail_step, fail_code); ``pops[k]`` is the real
    population of ``level`` after k steps. On an invariant breach the
    integration stops and ``fail_step`` is the offending step index.
    """
    rho = np.array(rho0, dtype=complex)
    heff = np.asarray(heff, dtype=complex)
    heff_h = heff.conj().T
    jumps = [np.asarray(j, dtype=complex) for j in jumps]
    jumps_h = [j.conj().T for j in jumps]
    pops = np.empty(nsteps + 1)
    pops[0] = rho[level, level].real
    half = 0.5 * dt
    for step in range(1, nsteps + 1):
        k1 = _rhs(rho, heff, heff_h, jumps, jumps_h)
        k2 = _rhs(rho + half * k1, heff, heff_h, jumps, jumps_h)
        k3 = _rhs(rho + half * k2, heff, heff_h, jumps, jumps_h)
        k4 = _rhs(rho + dt * k3, heff, heff_h, jumps, jumps_h)
        rho = rho + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        pops[step] = rho[level, level].real
        code = _check(rho, tol_trace, tol_herm, tol_pos)
        if code != OK:
            return rho, pops[: step + 1], step, code
    return rho, pops, -1, OK
