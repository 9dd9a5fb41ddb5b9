# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: complex Jacobi eigensolver and RK4 Lindblad stepper.

Matrices are at most 4x4 and live in flat stack buffers indexed i*4+j.
"""

import numpy as np

from libc.math cimport fabs, hypot, sqrt

DEF NMAX = 4
DEF MAX_SWEEPS = 60

cdef enum:
    ST_OK = 0
    ST_TRACE = 1
    ST_HERMITIAN = 2
    ST_POSITIVITY = 3

OK = ST_OK
FAIL_TRACE = ST_TRACE
FAIL_HERMITIAN = ST_HERMITIAN
FAIL_POSITIVITY = ST_POSITIVITY


cdef inline double cabs2(double complex z) noexcept nogil:
    return z.real * z.real + z.imag * z.imag


cdef inline double complex cconj(double complex z) noexcept nogil:
    return z.real - 1j * z.imag


cdef int _jacobi(double complex* a, double complex* v, int n, double tol,
                 bint want_v) noexcept nogil:
    cdef int i, j, p, q, sweep
    cdef double fro = 0.0, off, r, theta, t, c, s
    cdef double complex phase, ph, g_pp, g_pq, g_qp, g_qq, xp, xq
    for i in range(n):
        for j in range(n):
            fro += cabs2(a[i * NMAX + j])
    fro = sqrt(fro)
    if want_v:
        for i in range(n):
            for j in range(n):
                v[i * NMAX + j] = 1.0 if i == j else 0.0
    for sweep in range(1, MAX_SWEEPS + 1):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                off += cabs2(a[p * NMAX + q])
        if sqrt(2.0 * off) <= tol * fro:
            return sweep - 1
        for p in range(n - 1):
            for q in range(p + 1, n):
                r = hypot(a[p * NMAX + q].real, a[p * NMAX + q].imag)
                if r == 0.0:
                    continue
                # hypot and componentwise division keep tiny elements out of the subnormal range
                phase = a[p * NMAX + q].real / r + 1j * (a[p * NMAX + q].imag / r)
                theta = (a[q * NMAX + q].real - a[p * NMAX + p].real) / (2.0 * r)
                if fabs(theta) > 1e150:
                    t = 0.5 / theta
                elif theta >= 0.0:
                    t = 1.0 / (theta + sqrt(theta * theta + 1.0))
                else:
                    t = -1.0 / (-theta + sqrt(theta * theta + 1.0))
                c = 1.0 / sqrt(t * t + 1.0)
                s = t * c
                ph = cconj(phase)
                g_pp = c
                g_pq = s
                g_qp = -s * ph
                g_qq = c * ph
                for i in range(n):
                    xp = a[i * NMAX + p]
                    xq = a[i * NMAX + q]
                    a[i * NMAX + p] = xp * g_pp + xq * g_qp
                    a[i * NMAX + q] = xp * g_pq + xq * g_qq
                for j in range(n):
                    xp = a[p * NMAX + j]
                    xq = a[q * NMAX + j]
                    a[p * NMAX + j] = cconj(g_pp) * xp + cconj(g_qp) * xq
                    a[q * NMAX + j] = cconj(g_pq) * xp + cconj(g_qq) * xq
                a[p * NMAX + q] = 0.0
                a[q * NMAX + p] = 0.0
                a[p * NMAX + p] = a[p * NMAX + p].real
                a[q * NMAX + q] = a[q * NMAX + q].real
                if want_v:
                    for i in range(n):
                        xp = v[i * NMAX + p]
                        xq = v[i * NMAX + q]
                        v[i * NMAX + p] = xp * g_pp + xq * g_qp
                        v[i * NMAX + q] = xp * g_pq + xq * g_qq
    return MAX_SWEEPS


def jacobi_eigh(a_in, double tol):
    """Cyclic complex Jacobi diagonalisation; see ``_pykernels.jacobi_eigh``."""
    cdef double complex[:, :] a_view = np.asarray(a_in, dtype=complex)
    cdef int n = a_view.shape[0]
    if n > NMAX or a_view.shape[1] != n:
        raise ValueError("jacobi_eigh supports square matrices up to 4x4")
    cdef double complex a[NMAX * NMAX]
    cdef double complex v[NMAX * NMAX]
    cdef int i, j, sweeps
    for i in range(n):
        for j in range(n):
            a[i * NMAX + j] = a_view[i, j]
    with nogil:
        sweeps = _jacobi(a, v, n, tol, True)
    w = np.empty(n)
    vec = np.empty((n, n), dtype=complex)
    for i in range(n):
        w[i] = a[i * NMAX + i].real
        for j in range(n):
            vec[i, j] = v[i * NMAX + j]
    return w, vec, sweeps


DEF NSUP = NMAX * NMAX


cdef void _step_matrix(double complex* heff, double complex* jumps, int njump, int n,
                       double dt, double complex* p) noexcept nogil:
    """p = sum_{k<=4} (dt L)^k / k!, the exact RK4 map for the constant generator L.

    L acts on row-major vec(rho) of size n*n:
    L = -i (Heff (x) I - I (x) conj(Heff)) + sum_m J_m (x) conj(J_m).
    """
    cdef int m2 = n * n, a, b, i, j, k, l, m, r, c, order
    cdef double complex lmat[NSUP * NSUP]
    cdef double complex tmp[NSUP * NSUP]
    cdef double complex acc
    cdef double complex* jm
    for a in range(m2 * m2):
        lmat[a] = 0.0
    for i in range(n):
        for j in range(n):
            r = i * n + j
            for k in range(n):
                # Heff rho: row i of Heff against column j of rho
                lmat[r * m2 + k * n + j] = lmat[r * m2 + k * n + j] - 1j * heff[i * NMAX + k]
                # rho Heff^H: (rho Heff^H)_ij = sum_k rho_ik conj(Heff_jk)
                lmat[r * m2 + i * n + k] = lmat[r * m2 + i * n + k] + 1j * cconj(heff[j * NMAX + k])
            for m in range(njump):
                jm = jumps + m * NSUP
                for k in range(n):
                    for l in range(n):
                        lmat[r * m2 + k * n + l] = (lmat[r * m2 + k * n + l]
                                                    + jm[i * NMAX + k] * cconj(jm[j * NMAX + l]))
    # Horner: p = I + dtL (I + dtL/2 (I + dtL/3 (I + dtL/4)))
    for a in range(m2):
        for b in range(m2):
            p[a * m2 + b] = (1.0 if a == b else 0.0) + lmat[a * m2 + b] * (dt / 4.0)
    for order in range(3, 0, -1):
        for a in range(m2):
            for b in range(m2):
                acc = 0.0
                for c in range(m2):
                    acc = acc + lmat[a * m2 + c] * p[c * m2 + b]
                tmp[a * m2 + b] = (1.0 if a == b else 0.0) + acc * (dt / order)
        for a in range(m2 * m2):
            p[a] = tmp[a]


cdef int _check(double complex* rho, int n, double tol_trace, double tol_herm,
                double tol_pos) noexcept nogil:
    cdef int i, j, k
    cdef double complex tr = 0.0, d, acc
    cdef double complex h[NMAX * NMAX]
    cdef double piv
    for i in range(n):
        tr = tr + rho[i * NMAX + i]
    if sqrt(cabs2(tr - 1.0)) > tol_trace:
        return ST_TRACE
    for i in range(n):
        for j in range(n):
            d = rho[i * NMAX + j] - cconj(rho[j * NMAX + i])
            if sqrt(cabs2(d)) > tol_herm:
                return ST_HERMITIAN
            h[i * NMAX + j] = 0.5 * (rho[i * NMAX + j] + cconj(rho[j * NMAX + i]))
    # lambda_min > -tol  <=>  rho + tol I admits a Cholesky factor; far cheaper than Jacobi per step
    for i in range(n):
        h[i * NMAX + i] = h[i * NMAX + i] + tol_pos
    for j in range(n):
        piv = h[j * NMAX + j].real
        for k in range(j):
            piv -= cabs2(h[j * NMAX + k])
        if not piv > 0.0:
            return ST_POSITIVITY
        piv = sqrt(piv)
        h[j * NMAX + j] = piv
        for i in range(j + 1, n):
            acc = h[i * NMAX + j]
            for k in range(j):
                acc = acc - h[i * NMAX + k] * cconj(h[j * NMAX + k])
            h[i * NMAX + j] = acc / piv
    return ST_OK


def lindblad_rk4(rho0, heff_in, jumps_in, double dt, long nsteps, int level,
                 double tol_trace, double tol_herm, double tol_pos):
    """Fixed-step RK4 Lindblad integration; see ``_pykernels.lindblad_rk4``."""
    cdef double complex[:, :] r_view = np.asarray(rho0, dtype=complex)
    cdef double complex[:, :] h_view = np.asarray(heff_in, dtype=complex)
    jarr = np.asarray(jumps_in, dtype=complex)
    cdef int n = r_view.shape[0]
    cdef int njump = 0 if jarr.size == 0 else jarr.shape[0]
    if n > NMAX:
        raise ValueError("lindblad_rk4 supports dimensions up to 4")
    if njump > 16:
        raise ValueError("at most 16 jump operators")
    cdef double complex rho[NMAX * NMAX]
    cdef double complex heff[NMAX * NMAX]
    cdef double complex jumps[16 * NMAX * NMAX]
    cdef double complex pmat[NSUP * NSUP]
    cdef double complex vec[NSUP]
    cdef double complex nxt[NSUP]
    cdef double complex acc
    cdef int i, j, m, a, b, m2 = n * n, code = ST_OK
    cdef long step, fail_step = -1
    for i in range(NMAX * NMAX):
        rho[i] = 0.0
        heff[i] = 0.0
    for i in range(n):
        for j in range(n):
            rho[i * NMAX + j] = r_view[i, j]
            heff[i * NMAX + j] = h_view[i, j]
    for m in range(njump):
        for i in range(n):
            for j in range(n):
                jumps[m * NMAX * NMAX + i * NMAX + j] = jarr[m, i, j]
    pops_arr = np.empty(nsteps + 1)
    cdef double[::1] pops = pops_arr
    pops[0] = rho[level * NMAX + level].real
    with nogil:
        _step_matrix(heff, jumps, njump, n, dt, pmat)
        for i in range(n):
            for j in range(n):
                vec[i * n + j] = rho[i * NMAX + j]
        for step in range(1, nsteps + 1):
            for a in range(m2):
                acc = 0.0
                for b in range(m2):
                    acc = acc + pmat[a * m2 + b] * vec[b]
                nxt[a] = acc
            for a in range(m2):
                vec[a] = nxt[a]
            for i in range(n):
                for j in range(n):
                    rho[i * NMAX + j] = vec[i * n + j]
            pops[step] = rho[level * NMAX + level].real
            code = _check(rho, n, tol_trace, tol_herm, tol_pos)
            if code != ST_OK:
                fail_step = step
                break
    out = np.empty((n, n), dtype=complex)
    for i in range(n):
        for j in range(n):
            out[i, j] = rho[i * NMAX + j]
    if fail_step >= 0:
        return out, pops_arr[: fail_step + 1], fail_step, code
    return out, pops_arr, -1, ST_OK
