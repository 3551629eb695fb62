"""B-spline and NURBS basis evaluation.

All routines follow the usual Cox-de Boor recursion on clamped (open) knot
vectors. Parametric domains are normalized to ``[0, 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "KnotVector",
    "BasisEval",
    "open_uniform",
    "find_span",
    "bspline_basis",
    "basis_matrix",
    "nurbs_basis_2d",
    "gauss_rule",
    "span_quadrature",
    "greville_abscissae",
    "interpolation_matrix",
]


class SplineError(ValueError):
    """Raised for malformed knot vectors or out-of-domain evaluations."""


@dataclass(frozen=True)
class KnotVector:
    """Clamped knot vector of polynomial degree ``degree``."""

    knots: np.ndarray
    degree: int

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float).copy()
        knots.setflags(write=False)
        object.__setattr__(self, "knots", knots)
        p = int(self.degree)
        object.__setattr__(self, "degree", p)
        if p < 0:
            raise SplineError(f"degree must be non-negative, got {p}")
        if knots.ndim != 1 or knots.size < 2 * (p + 1):
            raise SplineError("knot vector too short for its degree")
        if np.any(np.diff(knots) < 0):
            raise SplineError("knots must be non-decreasing")
        if np.any(knots[: p + 1] != knots[0]) or np.any(knots[-(p + 1):] != knots[-1]):
            raise SplineError("knot vector must be open (end knots repeated p+1 times)")
        if knots[0] < 0.0 or knots[-1] > 1.0 or knots[-1] <= knots[0]:
            raise SplineError("knots must lie in [0, 1] with a non-empty range")

    @property
    def n_basis(self) -> int:
        return self.knots.size - self.degree - 1

    @property
    def n_spans(self) -> int:
        return np.unique(self.knots).size - 1

    @property
    def breaks(self) -> np.ndarray:
        return np.unique(self.knots)


@dataclass(frozen=True)
class BasisEval:
    """Nonzero basis functions at one parameter value.

    ``values[k]`` belongs to basis function ``span - p + k``; ``derivatives``
    has one row per derivative order (row 0 is the first derivative).
    """

    span: int
    values: np.ndarray
    derivatives: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    @property
    def indices(self) -> np.ndarray:
        p = self.values.size - 1
        return np.arange(self.span - p, self.span + 1)


def open_uniform(n_basis: int, degree: int) -> KnotVector:
    """Open knot vector on [0, 1] with equally spaced interior knots."""
    if n_basis < degree + 1:
        raise SplineError(f"need at least {degree + 1} basis functions, got {n_basis}")
    n_spans = n_basis - degree
    interior = np.arange(1, n_spans) / n_spans
    knots = np.concatenate([np.zeros(degree + 1), interior, np.ones(degree + 1)])
    return KnotVector(knots, degree)


def find_span(kv: KnotVector, xi: float) -> int:
    """Index ``i`` with ``knots[i] <= xi < knots[i+1]`` (last span closed)."""
    U, p, n = kv.knots, kv.degree, kv.n_basis
    if not (U[0] <= xi <= U[-1]):
        raise SplineError(f"parameter {xi} outside knot range [{U[0]}, {U[-1]}]")
    if xi == U[-1]:
        return n - 1
    return int(np.searchsorted(U, xi, side="right") - 1)


def bspline_basis(kv: KnotVector, xi: float, deriv_order: int = 0) -> BasisEval:
    """Nonzero B-spline basis values (and derivatives) at ``xi``.

    Implements the triangular Cox-de Boor table with derivative recursion
    (Piegl & Tiller, algorithm A2.3).
    """
    p = kv.degree
    if deriv_order < 0 or deriv_order > p:
        raise SplineError(f"deriv_order must be in [0, {p}], got {deriv_order}")
    U = kv.knots
    span = find_span(kv, xi)

    ndu = np.zeros((p + 1, p + 1))
    left = np.zeros(p + 1)
    right = np.zeros(p + 1)
    ndu[0, 0] = 1.0
    for j in range(1, p + 1):
        left[j] = xi - U[span + 1 - j]
        right[j] = U[span + j] - xi
        saved = 0.0
        for r in range(j):
            ndu[j, r] = right[r + 1] + left[j - r]
            temp = ndu[r, j - 1] / ndu[j, r]
            ndu[r, j] = saved + right[r + 1] * temp
            saved = left[j - r] * temp
        ndu[j, j] = saved
    values = ndu[:, p].copy()

    ders = np.zeros((deriv_order, p + 1))
    if deriv_order:
        a = np.zeros((2, p + 1))
        for r in range(p + 1):
            s1, s2 = 0, 1
            a[0, 0] = 1.0
            for k in range(1, deriv_order + 1):
                d = 0.0
                rk, pk = r - k, p - k
                if r >= k:
                    a[s2, 0] = a[s1, 0] / ndu[pk + 1, rk]
                    d = a[s2, 0] * ndu[rk, pk]
                j1 = 1 if rk >= -1 else -rk
                j2 = k - 1 if r - 1 <= pk else p - r
                for j in range(j1, j2 + 1):
                    a[s2, j] = (a[s1, j] - a[s1, j - 1]) / ndu[pk + 1, rk + j]
                    d += a[s2, j] * ndu[rk + j, pk]
                if r <= pk:
                    a[s2, k] = -a[s1, k - 1] / ndu[pk + 1, r]
                    d += a[s2, k] * ndu[r, pk]
                ders[k - 1, r] = d
                s1, s2 = s2, s1
        fac = p
        for k in range(1, deriv_order + 1):
            ders[k - 1] *= fac
            fac *= p - k
    return BasisEval(span=span, values=values, derivatives=ders)


def basis_matrix(kv: KnotVector, xi, deriv_order: int = 0) -> np.ndarray:
    """Dense basis matrix of shape ``(deriv_order + 1, len(xi), n_basis)``."""
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    out = np.zeros((deriv_order + 1, xi.size, kv.n_basis))
    for m, x in enumerate(xi):
        ev = bspline_basis(kv, float(x), deriv_order)
        idx = ev.indices
        out[0, m, idx] = ev.values
        for k in range(deriv_order):
            out[k + 1, m, idx] = ev.derivatives[k]
    return out


def nurbs_basis_2d(kvU: KnotVector, kvV: KnotVector, weights, xi: float, eta: float):
    """Bivariate rational basis at ``(xi, eta)``.

    Returns ``(indices, values, grads)`` where ``indices`` holds the ``(i, j)``
    pairs of the ``(p+1)(q+1)`` nonzero functions, ``values`` their values and
    ``grads`` their ``(d/dxi, d/deta)`` derivatives.
    """
    w = np.asarray(weights, dtype=float)
    if w.shape != (kvU.n_basis, kvV.n_basis):
        raise SplineError(f"weights shape {w.shape} does not match basis counts")
    if np.any(w <= 0):
        raise SplineError("NURBS weights must be positive")
    eu = bspline_basis(kvU, xi, min(1, kvU.degree))
    ev = bspline_basis(kvV, eta, min(1, kvV.degree))
    iu, iv = eu.indices, ev.indices
    Bu, Bv = eu.values, ev.values
    dBu = eu.derivatives[0] if kvU.degree else np.zeros_like(Bu)
    dBv = ev.derivatives[0] if kvV.degree else np.zeros_like(Bv)

    wl = w[np.ix_(iu, iv)]
    num = wl * np.outer(Bu, Bv)
    num_du = wl * np.outer(dBu, Bv)
    num_dv = wl * np.outer(Bu, dBv)
    W, Wu, Wv = num.sum(), num_du.sum(), num_dv.sum()
    R = num / W
    Ru = (num_du * W - num * Wu) / W**2
    Rv = (num_dv * W - num * Wv) / W**2

    ii, jj = np.meshgrid(iu, iv, indexing="ij")
    indices = np.stack([ii.ravel(), jj.ravel()], axis=1)
    grads = np.stack([Ru.ravel(), Rv.ravel()], axis=1)
    return indices, R.ravel(), grads


def gauss_rule(n_points: int):
    """Gauss-Legendre points and weights on the reference interval [-1, 1]."""
    if not isinstance(n_points, (int, np.integer)) or not 1 <= n_points <= 10:
        raise SplineError(f"n_points must be an integer in [1, 10], got {n_points}")
    return np.polynomial.legendre.leggauss(int(n_points))


def span_quadrature(kv: KnotVector, n_points: int | None = None):
    """Gauss points and weights mapped onto every nonzero knot span."""
    n_points = kv.degree + 1 if n_points is None else n_points
    x, w = gauss_rule(n_points)
    b = kv.breaks
    a, c = b[:-1, None], b[1:, None]
    pts = 0.5 * (c - a) * x[None, :] + 0.5 * (c + a)
    wts = 0.5 * (c - a) * w[None, :]
    return pts.ravel(), wts.ravel()


def greville_abscissae(kv: KnotVector) -> np.ndarray:
    """Knot averages ``(xi_{i+1} + ... + xi_{i+p}) / p``."""
    p, n = kv.degree, kv.n_basis
    if p == 0:
        return 0.5 * (kv.knots[:-1] + kv.knots[1:])
    U = kv.knots
    g = np.array([U[i + 1: i + p + 1].sum() / p for i in range(n)])
    g[0], g[-1] = U[0], U[-1]
    return g


def interpolation_matrix(kv: KnotVector) -> np.ndarray:
    """Collocation matrix ``B[j, i] = B_i(g_j)`` at the Greville abscissae."""
    return basis_matrix(kv, greville_abscissae(kv))[0]
