"""Vectorized numpy implementation of the quadrature kernels.

Same contract as the compiled ``_kernels.assemble``; used when the extension
is unavailable or ``SNAPIGA_PURE_PYTHON`` is set.
"""

from __future__ import annotations

import numpy as np


def assemble(dNdX, active, wdet, u, mu, lam, mode):
    P, nq, k, _ = dNdX.shape
    nb = u.shape[1]
    ua = u[:, active]  # (P, nq, k, 2)
    F = np.einsum("pqai,pqaJ->pqiJ", ua, dNdX)
    F[..., 0, 0] += 1.0
    F[..., 1, 1] += 1.0
    det = F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
    empty = np.zeros((0, 0, 0))
    if np.any(det <= 0.0):
        return np.inf, np.zeros((P, nb, 2)) if mode >= 1 else empty, \
            np.zeros((P, 2 * nb, 2 * nb)) if mode >= 2 else empty, False
    lnJ = np.log(det)
    I1 = np.einsum("pqij,pqij->pq", F, F)
    energy = float(np.sum(wdet * (0.5 * mu * (I1 - 2.0 - 2.0 * lnJ) + 0.5 * lam * lnJ**2)))
    if mode == 0:
        return energy, empty, empty, True

    T = np.empty_like(F)
    T[..., 0, 0] = F[..., 1, 1] / det
    T[..., 0, 1] = -F[..., 1, 0] / det
    T[..., 1, 0] = -F[..., 0, 1] / det
    T[..., 1, 1] = F[..., 0, 0] / det
    Pk = mu * (F - T) + lam * lnJ[..., None, None] * T
    gq = np.einsum("pq,pqiJ,pqaJ->pqai", wdet, Pk, dNdX)
    grad = np.zeros((P, nb, 2))
    flat = np.broadcast_to(active, (P, nq, k))
    for p in range(P):
        np.add.at(grad[p], flat[p].ravel(), gq[p].reshape(-1, 2))
    if mode == 1:
        return energy, grad, empty, True

    c1 = (mu - lam * lnJ)[..., None, None, None, None]
    eye = np.eye(2)
    A = (mu * np.einsum("ik,JL->iJkL", eye, eye)
         + c1 * np.einsum("pqkJ,pqiL->pqiJkL", T, T)
         + lam * np.einsum("pqiJ,pqkL->pqiJkL", T, T))
    A *= wdet[..., None, None, None, None]
    hq = np.einsum("pqaJ,pqiJkL,pqbL->pqaibk", dNdX, A, dNdX)
    rows = (2 * active[:, :, None] + np.arange(2)[None, None, :])  # (nq, k, 2)
    ri = np.broadcast_to(rows[:, :, :, None, None], (nq, k, 2, k, 2))
    ci = np.broadcast_to(rows[:, None, None, :, :], (nq, k, 2, k, 2))
    lin = (ri * (2 * nb) + ci).ravel()
    hess = np.empty((P, 2 * nb, 2 * nb))
    for p in range(P):
        hess[p] = np.bincount(lin, weights=hq[p].ravel(), minlength=(2 * nb) ** 2).reshape(2 * nb, 2 * nb)
    return energy, grad, hess, True
