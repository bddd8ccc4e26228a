# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twin of ``_gl_numpy.solve``: identical algorithm, plain C loops.

Kept in lockstep with the numpy kernel; the backend-agreement test and
``benchmarks/bench_gl.py`` compare the two.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY, exp, fabs, log

cnp.import_array()


def solve(C, a, double eps, double tau, int max_iters, double tol):
    C = np.ascontiguousarray(C, dtype=np.float64)
    a = np.ascontiguousarray(a, dtype=np.float64)
    cdef const double[:, ::1] Cv = C
    cdef const double[::1] av = a
    cdef Py_ssize_t n = Cv.shape[0]
    cdef Py_ssize_t m = Cv.shape[1]

    P_arr = np.zeros((n, m), dtype=np.float64)
    u_arr = np.zeros(n, dtype=np.float64)
    v_arr = np.zeros(m, dtype=np.float64)
    col_arr = np.zeros(m, dtype=np.float64)
    cdef double[:, ::1] P = P_arr
    cdef double[::1] u = u_arr
    cdef double[::1] v = v_arr
    cdef double[::1] colsum = col_arr

    cdef double two_tau = 2.0 * tau
    cdef double obj = INFINITY, obj_prev = INFINITY
    cdef double mx, s, e, w, ew, cc, hh, Li, p, lin, ent, rq, cq, rowsum, scale
    cdef Py_ssize_t i, j, k, it
    cdef bint converged = False
    cdef int iters = 0

    with nogil:
        for it in range(1, max_iters + 1):
            # column block: closed form clamped to [-tau, tau]
            for j in range(m):
                mx = -INFINITY
                for i in range(n):
                    e = (u[i] - Cv[i, j]) / eps
                    if e > mx:
                        mx = e
                s = 0.0
                for i in range(n):
                    s += exp((u[i] - Cv[i, j]) / eps - mx)
                e = -eps * (mx + log(s))
                if e > tau:
                    e = tau
                elif e < -tau:
                    e = -tau
                v[j] = e

            # row block: Newton in w = log(row mass)
            for i in range(n):
                mx = -INFINITY
                for j in range(m):
                    e = (v[j] - Cv[i, j]) / eps
                    if e > mx:
                        mx = e
                s = 0.0
                for j in range(m):
                    s += exp((v[j] - Cv[i, j]) / eps - mx)
                Li = mx + log(s)
                cc = eps * Li + two_tau * av[i]
                w = cc / eps
                if w > 0.0:
                    w = 0.0
                scale = 1.0 if fabs(cc) < 1.0 else fabs(cc)
                for k in range(60):
                    ew = exp(w)
                    hh = eps * w + two_tau * ew - cc
                    if fabs(hh) <= 1e-13 * scale:
                        break
                    w = w - hh / (eps + two_tau * ew)
                    if w > 709.0:
                        w = 709.0
                u[i] = eps * (w - Li)

            # primal objective at the refreshed plan
            lin = 0.0
            ent = 0.0
            rq = 0.0
            cq = 0.0
            for j in range(m):
                colsum[j] = 0.0
            for i in range(n):
                rowsum = 0.0
                for j in range(m):
                    e = (u[i] + v[j] - Cv[i, j]) / eps
                    p = exp(e)
                    P[i, j] = p
                    lin += Cv[i, j] * p
                    ent += p * (e - 1.0)
                    rowsum += p
                    colsum[j] += p
                rq += (rowsum - av[i]) * (rowsum - av[i])
            for j in range(m):
                cq += fabs(colsum[j] - 1.0)
            obj = lin + eps * ent + tau * rq + tau * cq
            iters = it
            if fabs(obj - obj_prev) <= tol * (1.0 if fabs(obj) < 1.0 else fabs(obj)):
                converged = True
                break
            obj_prev = obj

    return float(obj), P_arr, iters, bool(converged)
