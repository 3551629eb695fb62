# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled quadrature loops for neo-Hookean patches.

Shapes (``P`` patches, ``nq`` quadrature points, ``k`` active functions per
point, ``nb`` control points per patch):

* ``dNdX``   (P, nq, k, 2)  physical basis gradients
* ``active`` (nq, k)        int32 control point index of each active function
* ``wdet``   (P, nq)        quadrature weight times Jacobian determinant
* ``u``      (P, nb, 2)     control point displacements

``assemble(..., mode)`` returns ``(energy, grad, hess, ok)`` where mode 0
skips grad/hess, mode 1 skips hess. ``ok`` is False (and energy +inf) when
any quadrature point has ``det F <= 0``.
"""

import numpy as np
from libc.math cimport log, INFINITY


def assemble(const double[:, :, :, ::1] dNdX, const int[:, ::1] active,
             const double[:, ::1] wdet, const double[:, :, ::1] u,
             double mu, double lam, int mode):
    cdef Py_ssize_t P = dNdX.shape[0]
    cdef Py_ssize_t nq = dNdX.shape[1]
    cdef Py_ssize_t k = dNdX.shape[2]
    cdef Py_ssize_t nb = u.shape[1]
    grad_arr = np.zeros((P, nb, 2)) if mode >= 1 else np.zeros((0, 0, 0))
    hess_arr = np.zeros((P, 2 * nb, 2 * nb)) if mode >= 2 else np.zeros((0, 0, 0))
    cdef double[:, :, ::1] g = grad_arr
    cdef double[:, :, ::1] H = hess_arr
    cdef double energy = 0.0
    cdef bint ok = True
    cdef Py_ssize_t p, q, a, b, ia, ib
    cdef int i, kk, J, L
    cdef double F[2][2]
    cdef double T[2][2]
    cdef double Pk[2][2]
    cdef double A[2][2][2][2]
    cdef double C[2][2][2]
    cdef double det, lnJ, wd, dx, dy, c1, s, da0, da1

    with nogil:
        for p in range(P):
            for q in range(nq):
                F[0][0] = 1.0; F[0][1] = 0.0; F[1][0] = 0.0; F[1][1] = 1.0
                for a in range(k):
                    ia = active[q, a]
                    dx = dNdX[p, q, a, 0]
                    dy = dNdX[p, q, a, 1]
                    F[0][0] += u[p, ia, 0] * dx
                    F[0][1] += u[p, ia, 0] * dy
                    F[1][0] += u[p, ia, 1] * dx
                    F[1][1] += u[p, ia, 1] * dy
                det = F[0][0] * F[1][1] - F[0][1] * F[1][0]
                if det <= 0.0:
                    ok = False
                    break
                lnJ = log(det)
                wd = wdet[p, q]
                energy += wd * (0.5 * mu * (F[0][0] * F[0][0] + F[0][1] * F[0][1]
                                            + F[1][0] * F[1][0] + F[1][1] * F[1][1]
                                            - 2.0 - 2.0 * lnJ)
                                + 0.5 * lam * lnJ * lnJ)
                if mode == 0:
                    continue
                # T = F^-T
                T[0][0] = F[1][1] / det
                T[0][1] = -F[1][0] / det
                T[1][0] = -F[0][1] / det
                T[1][1] = F[0][0] / det
                for i in range(2):
                    for J in range(2):
                        Pk[i][J] = mu * (F[i][J] - T[i][J]) + lam * lnJ * T[i][J]
                for a in range(k):
                    ia = active[q, a]
                    da0 = dNdX[p, q, a, 0]
                    da1 = dNdX[p, q, a, 1]
                    g[p, ia, 0] += wd * (Pk[0][0] * da0 + Pk[0][1] * da1)
                    g[p, ia, 1] += wd * (Pk[1][0] * da0 + Pk[1][1] * da1)
                if mode == 1:
                    continue
                c1 = mu - lam * lnJ
                for i in range(2):
                    for J in range(2):
                        for kk in range(2):
                            for L in range(2):
                                s = c1 * T[kk][J] * T[i][L] + lam * T[i][J] * T[kk][L]
                                if i == kk and J == L:
                                    s += mu
                                A[i][J][kk][L] = wd * s
                for a in range(k):
                    ia = active[q, a]
                    da0 = dNdX[p, q, a, 0]
                    da1 = dNdX[p, q, a, 1]
                    for i in range(2):
                        for kk in range(2):
                            for L in range(2):
                                C[i][kk][L] = da0 * A[i][0][kk][L] + da1 * A[i][1][kk][L]
                    for b in range(k):
                        ib = active[q, b]
                        dx = dNdX[p, q, b, 0]
                        dy = dNdX[p, q, b, 1]
                        for i in range(2):
                            for kk in range(2):
                                H[p, 2 * ia + i, 2 * ib + kk] += C[i][kk][0] * dx + C[i][kk][1] * dy
            if not ok:
                break
    if not ok:
        return INFINITY, grad_arr, hess_arr, False
    return energy, grad_arr, hess_arr, True
