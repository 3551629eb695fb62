"""Displacement-controlled quasi-static solver.

The total strain energy of the deformable patches is minimized over the
global dofs at each prescribed top displacement ``d``. Rigid patches carry
no energy and are skipped. Units: cm, MPa, J (1 cm out-of-plane thickness),
reaction forces in N.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import kernels
from .geometry import DofMap, PatchSet, assemble_structure
from .material import NU_DEFAULT, MaterialParams, lame_parameters
from .splines import bspline_basis, span_quadrature

__all__ = [
    "SolverError",
    "StepRejected",
    "SolverOptions",
    "LoadSchedule",
    "DeformationState",
    "SweepResult",
    "QuadBasis",
    "Model",
    "build_model",
    "newton_solve",
    "load_sweep",
    "greedy_coloring",
]

log = logging.getLogger(__name__)

THICKNESS = 1.0  # out-of-plane, cm
FORCE_SCALE = 100.0  # J/cm -> N


class StepRejected(Exception):
    """A load increment could not be solved (inversion or non-convergence)."""


class SolverError(RuntimeError):
    """A sweep could not proceed; ``last_state`` holds the last converged state."""

    def __init__(self, msg, last_state=None, result=None):
        super().__init__(msg)
        self.last_state = last_state
        self.result = result


@dataclass(frozen=True)
class SolverOptions:
    rtol: float = 1e-8
    atol: float = 1e-10
    max_iter: int = 50
    armijo: float = 1e-4
    max_backtracks: int = 30
    linear_solver: str = "auto"  # "auto" | "direct" | "gmres"
    direct_max_dofs: int = 5000
    gmres_restart: int = 50
    gmres_rtol: float = 1e-10
    snap_max_iter: int = 400
    escape_saddles: bool = True
    fast_iterations: int = 4


@dataclass(frozen=True)
class LoadSchedule:
    """Sample displacements plus adaptive increment bounds (cm)."""

    samples: tuple
    increment: float
    min_increment: float
    max_increment: float
    growth: float = 2.0
    shrink: float = 0.5

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim != 1 or s.size < 1 or s[0] != 0.0 or np.any(np.diff(s) <= 0):
            raise ValueError("schedule samples must start at 0 and increase strictly")
        if not 0 < self.min_increment <= self.increment <= self.max_increment:
            raise ValueError("need 0 < min_increment <= increment <= max_increment")
        object.__setattr__(self, "samples", tuple(s.tolist()))

    @classmethod
    def uniform(cls, d_max, h3, n_per_h3=40, samples=None):
        """Increments ``h3/40`` (bounds ``h3/400``..``h3/10``); samples on that grid."""
        inc = h3 / n_per_h3
        if samples is None:
            n = max(1, int(np.ceil(d_max / inc - 1e-9)))
            samples = np.linspace(0.0, d_max, n + 1)
        return cls(samples=tuple(samples), increment=min(inc, d_max), min_increment=h3 / 400,
                   max_increment=max(h3 / 10, min(inc, d_max)))

    @property
    def d_max(self) -> float:
        return self.samples[-1]


@dataclass
class DeformationState:
    q: np.ndarray
    d: float
    energy: float
    force: float
    iterations: int
    residual: float
    snapped: bool = False
    negative_eigs: int = 0


@dataclass
class SweepResult:
    states: list
    sample_index: list  # index into states of each schedule sample
    wall_time: float = 0.0
    rejections: int = 0

    @property
    def d(self) -> np.ndarray:
        return np.array([s.d for s in self.states])

    @property
    def energy(self) -> np.ndarray:
        return np.array([s.energy for s in self.states])

    @property
    def force(self) -> np.ndarray:
        return np.array([s.force for s in self.states])

    def samples(self) -> list:
        return [self.states[i] for i in self.sample_index]

    def sampled_curve(self):
        st = self.samples()
        return (np.array([s.d for s in st]), np.array([s.energy for s in st]),
                np.array([s.force for s in st]))

    def summary(self) -> dict:
        it = [s.iterations for s in self.states]
        return dict(increments=len(self.states) - 1, rejections=self.rejections,
                    newton_iterations=int(np.sum(it)), max_newton_iterations=int(np.max(it)),
                    snapped=int(sum(s.snapped for s in self.states)),
                    max_residual=float(max(s.residual for s in self.states)),
                    wall_time_s=self.wall_time)


# ---------------------------------------------------------------------------
# quadrature data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuadBasis:
    """Tensor-product basis at all quadrature points of one patch parameter domain."""

    active: np.ndarray  # (nq, k) int32 flat control point index (i * nv + j)
    N: np.ndarray       # (nq, k)
    dN: np.ndarray      # (nq, k, 2) parametric derivatives
    weights: np.ndarray  # (nq,)
    points: np.ndarray  # (nq, 2) parameter values

    @classmethod
    def build(cls, kv_u, kv_v, n_gauss=None):
        xu, wu = span_quadrature(kv_u, n_gauss)
        xv, wv = span_quadrature(kv_v, n_gauss)
        nv = kv_v.n_basis
        eu = [bspline_basis(kv_u, float(x), 1) for x in xu]
        ev = [bspline_basis(kv_v, float(x), 1) for x in xv]
        act, N, dN, w, pts = [], [], [], [], []
        for m, a in enumerate(eu):
            for n, b in enumerate(ev):
                act.append((a.indices[:, None] * nv + b.indices[None, :]).ravel())
                N.append(np.outer(a.values, b.values).ravel())
                dN.append(np.stack([np.outer(a.derivatives[0], b.values).ravel(),
                                    np.outer(a.values, b.derivatives[0]).ravel()], axis=-1))
                w.append(wu[m] * wv[n])
                pts.append((xu[m], xv[n]))
        return cls(active=np.ascontiguousarray(act, dtype=np.int32), N=np.array(N),
                   dN=np.array(dN), weights=np.array(w), points=np.array(pts))

    @property
    def n_points(self) -> int:
        return self.weights.size


def patch_geometry(control, weights, basis: QuadBasis):
    """Physical basis gradients and ``w * det G`` for patches.

    ``control`` has shape ``(P, nb, 2)`` (complex entries allowed), ``weights``
    ``(P, nb)``. Returns ``(dNdX (P,nq,k,2), wdet (P,nq), detG (P,nq))``.
    """
    act = basis.active
    dR = _rational_derivs(weights, basis)
    Xa = control[:, act]  # (P, nq, k, 2)
    G = np.einsum("pqac,pqad->pqcd", Xa, dR)
    det = G[..., 0, 0] * G[..., 1, 1] - G[..., 0, 1] * G[..., 1, 0]
    Ginv = np.empty_like(G)
    Ginv[..., 0, 0] = G[..., 1, 1] / det
    Ginv[..., 1, 1] = G[..., 0, 0] / det
    Ginv[..., 0, 1] = -G[..., 0, 1] / det
    Ginv[..., 1, 0] = -G[..., 1, 0] / det
    dNdX = np.einsum("pqad,pqdJ->pqaJ", dR, Ginv)
    wdet = basis.weights[None, :] * det * THICKNESS
    return dNdX, wdet, det


def _rational_derivs(weights, basis: QuadBasis):
    P = weights.shape[0]
    dN = np.broadcast_to(basis.dN, (P,) + basis.dN.shape)
    if np.all(weights == 1.0):
        return dN
    w = weights[:, basis.active]  # (P, nq, k)
    Nw = w * basis.N[None]
    dNw = w[..., None] * dN
    W = Nw.sum(axis=-1)[..., None]
    dW = dNw.sum(axis=-2)[:, :, None, :]
    return (dNw * W[..., None] - Nw[..., None] * dW) / W[..., None] ** 2


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


class Model:
    """Precomputed quadrature data and assembly maps for one patch set."""

    def __init__(self, ps: PatchSet, dm: DofMap, E: float, nu: float = NU_DEFAULT, n_gauss=None):
        self.ps, self.dm = ps, dm
        self.mat: MaterialParams = lame_parameters(E, nu)
        self.basis = QuadBasis.build(ps.kv_u, ps.kv_v, n_gauss)
        nu_, nv_ = ps.shape
        self.nb = nu_ * nv_
        self.def_idx = np.flatnonzero(~ps.rigid_mask())
        control = ps.control_array().reshape(ps.n_patches, self.nb, 2)
        weights = np.stack([p.weights.reshape(-1) for p in ps.patches])
        self.control = control
        self.weights = weights
        dNdX, wdet, det = patch_geometry(control[self.def_idx], weights[self.def_idx], self.basis)
        if np.any(det <= 0):
            bad = self.def_idx[np.unique(np.nonzero(det <= 0)[0])]
            names = [f"{ps.patches[b].name}(row {ps.patches[b].row})" for b in bad]
            from .geometry import GeometryError
            raise GeometryError(f"non-positive geometric Jacobian in patches {names}")
        self.dNdX = np.ascontiguousarray(dNdX)
        self.wdet = np.ascontiguousarray(wdet)
        self.detG = det

        ndl = 2 * self.nb
        loc = dm.local_dof.reshape(ps.n_patches, ndl)[self.def_idx]
        coef = dm.local_coef.reshape(ps.n_patches, ndl)[self.def_idx]
        self.loc, self.coef = loc, coef
        self.n_dofs = dm.n_dofs
        valid = loc >= 0
        self._gsel = np.flatnonzero(valid.ravel())
        self._gidx = loc.ravel()[self._gsel]
        self._u_base = np.ascontiguousarray(coef.reshape(-1))
        self._pattern()

    # -- maps --------------------------------------------------------------
    def _pattern(self):
        n = self.n_dofs
        loc = self.loc
        M = (loc[:, :, None] >= 0) & (loc[:, None, :] >= 0)
        rows = np.broadcast_to(loc[:, :, None], M.shape)[M]
        cols = np.broadcast_to(loc[:, None, :], M.shape)[M]
        key = rows.astype(np.int64) * n + cols
        uniq, inv = np.unique(key, return_inverse=True)
        r, c = uniq // n, uniq % n
        indptr = np.concatenate([[0], np.cumsum(np.bincount(r, minlength=n))])
        self._hsel = np.flatnonzero(M.ravel())
        self._hslot = inv.ravel()
        self._indptr = indptr
        self._indices = c.astype(np.int32)
        self.nnz = uniq.size

    def sparsity(self) -> sp.csr_matrix:
        """Boolean pattern: (i, j) stored iff dofs i and j share a deformable patch."""
        return sp.csr_matrix((np.ones(self.nnz, dtype=bool), self._indices.copy(), self._indptr.copy()),
                             shape=(self.n_dofs, self.n_dofs))

    def local_u(self, q, d):
        u = d * self._u_base
        u[self._gsel] = q[self._gidx]
        return u.reshape(len(self.def_idx), self.nb, 2)

    def scatter(self, per_patch) -> np.ndarray:
        """Sum per-patch local vectors ``(Pd, 2 nb)`` into a global vector."""
        return np.bincount(self._gidx, weights=per_patch.reshape(-1)[self._gsel], minlength=self.n_dofs)

    def with_E(self, E: float) -> "Model":
        other = object.__new__(Model)
        other.__dict__.update(self.__dict__)
        other.mat = lame_parameters(E, self.mat.nu)
        return other

    # -- evaluation ----------------------------------------------------------
    def _run(self, q, d, mode):
        u = self.local_u(np.asarray(q, dtype=float), float(d))
        return kernels.assemble(self.dNdX, self.basis.active, self.wdet, u,
                                self.mat.mu, self.mat.lam, mode)

    def energy(self, q, d) -> float:
        """Total strain energy (J); ``inf`` if an element inverts."""
        return self._run(q, d, 0)[0]

    def gradient(self, q, d):
        """``(energy, global gradient, dPsi/dd)``; gradient is None on inversion."""
        E, g, _, ok = self._run(q, d, 1)
        if not ok:
            return np.inf, None, np.nan
        gl = g.reshape(len(self.def_idx), -1)
        return E, self.scatter(gl), float(np.sum(gl * self.coef))

    def hessian(self, q, d):
        """``(energy, gradient, H (CSR), dg/dd, dPsi/dd)``; raises StepRejected on inversion."""
        E, g, h, ok = self._run(q, d, 2)
        if not ok:
            raise StepRejected("inverted element")
        gl = g.reshape(len(self.def_idx), -1)
        grad = self.scatter(gl)
        data = np.bincount(self._hslot, weights=h.reshape(-1)[self._hsel], minlength=self.nnz)
        H = sp.csr_matrix((data, self._indices, self._indptr), shape=(self.n_dofs, self.n_dofs))
        hb = self.scatter(np.einsum("pij,pj->pi", h, self.coef))
        return E, grad, H, hb, float(np.sum(gl * self.coef))

    def reaction_force(self, q, d) -> float:
        """Compressive reaction force (N) on the loaded edge."""
        _, g, dpsi = self.gradient(q, d)
        if g is None:
            raise StepRejected("inverted element")
        return FORCE_SCALE * dpsi

    # -- colored finite-difference Hessian --------------------------------------
    def hvp(self, q, d, v, eps=None):
        """Hessian-vector product by central differences of the gradient."""
        v = np.asarray(v, dtype=float)
        nv = np.linalg.norm(v)
        if nv == 0:
            return np.zeros(self.n_dofs)
        h = (1e-6 * max(1.0, np.linalg.norm(q))) / nv if eps is None else eps
        _, gp, _ = self.gradient(q + h * v, d)
        _, gm, _ = self.gradient(q - h * v, d)
        if gp is None or gm is None:
            raise StepRejected("inverted element during probing")
        return (gp - gm) / (2 * h)

    def colored_hessian(self, q, d, colors=None):
        """Sparse Hessian recovered from one probe per color (distance-2 coloring)."""
        pattern = self.sparsity()
        colors = greedy_coloring(pattern) if colors is None else colors
        n = self.n_dofs
        rows = np.repeat(np.arange(n), np.diff(pattern.indptr))
        cols = pattern.indices
        data = np.empty(cols.size)
        for c in range(colors.max() + 1 if n else 0):
            seed = (colors == c).astype(float)
            hv = self.hvp(q, d, seed)
            sel = colors[cols] == c
            data[sel] = hv[rows[sel]]
        H = sp.csr_matrix((data, cols, pattern.indptr), shape=(n, n))
        return 0.5 * (H + H.T)


def greedy_coloring(pattern: sp.csr_matrix) -> np.ndarray:
    """Distance-2 greedy coloring: columns sharing a nonzero row get distinct colors."""
    A = sp.csr_matrix(pattern, dtype=bool)
    At = A.T.tocsr()
    n = A.shape[1]
    colors = np.full(n, -1, dtype=np.int64)
    mark = np.full(n + 1, -1, dtype=np.int64)
    for j in range(n):
        for r in At.indices[At.indptr[j]:At.indptr[j + 1]]:
            nb = A.indices[A.indptr[r]:A.indptr[r + 1]]
            c = colors[nb]
            mark[c[c >= 0]] = j
        c = 0
        while mark[c] == j:
            c += 1
        colors[j] = c
    return colors


def build_model(design, resolution=7, degree=3, rigid=True, nu=NU_DEFAULT, E=None):
    """Structure + quadrature model for a :class:`~snapiga.geometry.DesignParams`."""
    ps, dm = assemble_structure(design, resolution=resolution, degree=degree, rigid=rigid)
    return Model(ps, dm, design.E if E is None else E, nu)


# ---------------------------------------------------------------------------
# Newton minimization
# ---------------------------------------------------------------------------


@dataclass
class _Factor:
    solve: object
    negative: int  # -1 when unknown
    shifted: bool


def _direct_factor(H):
    try:
        lu = spla.splu(H.tocsc(), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                       options=dict(SymmetricMode=True))
    except RuntimeError:
        return None, -1
    if np.array_equal(lu.perm_r, lu.perm_c):
        neg = int(np.count_nonzero(lu.U.diagonal() < 0))
    else:
        neg = -1
    return lu, neg


def _factor_descent(H, opts: SolverOptions, use_gmres: bool):
    """Factorize H, shifting it until positive definite. Returns (_Factor, inertia of H)."""
    n = H.shape[0]
    diag = H.diagonal()
    scale = max(np.abs(diag).mean() if n else 1.0, 1e-300)
    tau, inertia = 0.0, None
    I = sp.identity(n, format="csr")
    for _ in range(40):
        Hs = H + tau * scale * I if tau else H
        if use_gmres and not tau:
            f = _gmres_factor(Hs, opts)
            if f is not None:
                return f, -1
        lu, neg = _direct_factor(Hs)
        if inertia is None:
            inertia = neg
        if lu is not None and neg == 0:
            return _Factor(lu.solve, 0, bool(tau)), inertia
        if lu is not None and neg == -1:
            # pivoting broke the inertia reading; rely on curvature checks
            return _Factor(lu.solve, -1, bool(tau)), inertia
        tau = 1e-8 if tau == 0 else tau * 10
    raise StepRejected("could not build a positive definite model Hessian")


def _gmres_factor(H, opts: SolverOptions):
    try:
        ilu = spla.spilu(H.tocsc(), drop_tol=0.0, fill_factor=1.0)
    except RuntimeError:
        return None
    M = spla.LinearOperator(H.shape, ilu.solve)

    def solve(b):
        x, info = spla.gmres(H, b, M=M, restart=opts.gmres_restart, rtol=opts.gmres_rtol,
                             atol=0.0, maxiter=20)
        if info != 0:
            raise StepRejected("GMRES did not converge")
        return x

    return _Factor(solve, -1, False)


def _lowest_mode(H):
    """Most negative eigenpair of a symmetric matrix (None if not found)."""
    n = H.shape[0]
    if n <= 4000:
        w, V = np.linalg.eigh(H.toarray())
        return w[0], V[:, 0]
    try:
        w, V = spla.eigsh(H, k=1, which="SA", tol=1e-8, maxiter=20 * n)
    except spla.ArpackNoConvergence:
        return 0.0, None
    return w[0], V[:, 0]


def _state(model, q, d, E, dpsi, it, res, snapped=False, neg=0):
    return DeformationState(q=q, d=float(d), energy=float(E), force=FORCE_SCALE * dpsi,
                            iterations=it, residual=float(res), snapped=snapped, negative_eigs=neg)


def newton_solve(model: Model, d, q_init, opts: SolverOptions | None = None, g_ref=None,
                 max_iter=None, return_factor=False):
    """Minimize the energy at fixed ``d`` starting from ``q_init``.

    Modified Newton: the Hessian is shifted until positive definite, so every
    step is a descent direction; Armijo backtracking on the true energy.
    Converged saddle points are left along the lowest curvature mode.
    Raises :class:`StepRejected` on failure.
    """
    opts = opts or SolverOptions()
    max_iter = opts.max_iter if max_iter is None else max_iter
    q = np.array(q_init, dtype=float)
    if not np.all(np.isfinite(q)):
        raise StepRejected("non-finite initial guess")
    use_gmres = opts.linear_solver == "gmres" or (
        opts.linear_solver == "auto" and model.n_dofs > opts.direct_max_dofs)
    E, g, H, hb, dpsi = model.hessian(q, d)
    gnorm = np.linalg.norm(g)
    tol = max(opts.rtol * (gnorm if g_ref is None else g_ref), opts.atol)
    escapes = stagnant = 0
    factor = None
    for it in range(max_iter + 1):
        if not np.isfinite(E):
            raise StepRejected("non-finite energy")
        factor, inertia = _factor_descent(H, opts, use_gmres)
        if gnorm <= tol:
            if inertia > 0 and opts.escape_saddles and escapes < 3:
                lam, v = _lowest_mode(H)
                if v is not None and lam < 0:
                    q_new = _escape(model, q, d, E, v)
                    if q_new is not None:
                        escapes += 1
                        q = q_new
                        E, g, H, hb, dpsi = model.hessian(q, d)
                        gnorm = np.linalg.norm(g)
                        continue
            st = _state(model, q, d, E, dpsi, it, gnorm, neg=max(inertia, 0))
            return (st, factor, hb) if return_factor else st
        if it == max_iter:
            break
        p = -factor.solve(g)
        slope = g @ p
        if not np.isfinite(slope) or slope >= 0:
            # inaccurate direction (unknown inertia); fall back to a scaled gradient step
            p = -g / max(np.abs(H.diagonal()).max(), 1e-300)
            slope = g @ p
        alpha, accepted = 1.0, False
        for _ in range(opts.max_backtracks + 1):
            q_try = q + alpha * p
            E_try = model.energy(q_try, d)
            if E_try <= E + opts.armijo * alpha * slope:
                accepted = True
                break
            # energy differences below roundoff: accept a full Newton step that lowers the residual
            if alpha == 1.0 and np.isfinite(E_try) and abs(E_try - E) <= 1e-13 * max(abs(E), 1e-3) \
                    and not factor.shifted:
                _, g_try, _ = model.gradient(q_try, d)
                if g_try is not None and np.linalg.norm(g_try) < gnorm:
                    accepted = True
                    break
            alpha *= 0.5
        if not accepted:
            if gnorm <= 1e3 * tol:
                st = _state(model, q, d, E, dpsi, it, gnorm, neg=max(inertia, 0))
                return (st, factor, hb) if return_factor else st
            raise StepRejected("line search failed")
        # a step with no measurable energy decrease means the residual sits at roundoff
        stagnant = stagnant + 1 if E_try >= E - 1e-14 * max(abs(E), 1e-3) else 0
        q = q_try
        E, g, H, hb, dpsi = model.hessian(q, d)
        gnorm = np.linalg.norm(g)
        if stagnant and gnorm <= 1e3 * tol:
            tol = gnorm  # accept the roundoff floor; the loop head handles saddles
        if stagnant >= 3:
            raise StepRejected(f"stagnated at |g|={gnorm:.3e}")
    raise StepRejected(f"no convergence after {max_iter} iterations (|g|={gnorm:.3e})")


def _escape(model, q, d, E, v):
    """Move off a saddle along a negative curvature direction."""
    v = v / np.abs(v).max()
    L = float(np.ptp(model.control[..., 0]))
    for sign in (1.0, -1.0):
        alpha = 1e-3 * L
        for _ in range(20):
            q_try = q + sign * alpha * v
            E_try = model.energy(q_try, d)
            if E_try < E - 1e-12 * max(abs(E), 1e-6):
                return q_try
            alpha *= 0.5
    return None


# ---------------------------------------------------------------------------
# continuation
# ---------------------------------------------------------------------------


def load_sweep(model: Model, schedule: LoadSchedule, opts: SolverOptions | None = None,
               q0=None) -> SweepResult:
    """Warm-started continuation through all schedule samples.

    The increment is halved on rejection down to the minimum, where a long
    unconstrained minimization is attempted (snap-through onto another
    branch). After two consecutive fast convergences the increment grows.
    """
    opts = opts or SolverOptions()
    t0 = time.perf_counter()
    q = np.zeros(model.n_dofs) if q0 is None else np.asarray(q0, dtype=float)
    state, factor, hb = newton_solve(model, 0.0, q, opts, return_factor=True)
    states, sample_index = [state], [0]
    samples = schedule.samples
    h = schedule.increment
    fast, rejections = 0, 0
    si = 1
    tiny = 1e-9 * max(schedule.d_max, 1e-12)
    while si < len(samples):
        target = samples[si]
        step = min(h, target - state.d)
        if target - state.d - step < 0.25 * schedule.min_increment:
            step = target - state.d
        d_new = target if abs(state.d + step - target) <= tiny else state.d + step
        try:
            new, factor_new, hb_new = _increment(model, state, factor, hb, d_new, opts)
        except StepRejected as exc:
            rejections += 1
            fast = 0
            if step > schedule.min_increment * (1 + 1e-9):
                h = max(step * schedule.shrink, schedule.min_increment)
                continue
            log.debug("increment to d=%.4f rejected at minimum size (%s); snapping", d_new, exc)
            try:
                new, factor_new, hb_new = newton_solve(
                    model, d_new, state.q, opts, max_iter=opts.snap_max_iter, return_factor=True)
                new.snapped = True
            except StepRejected as exc2:
                res = SweepResult(states, sample_index, time.perf_counter() - t0, rejections)
                raise SolverError(f"load increment underflow at d={state.d:.5f} cm: {exc2}",
                                  last_state=state, result=res) from exc2
        states.append(new)
        state, factor, hb = new, factor_new, hb_new
        if abs(state.d - target) <= tiny:
            sample_index.append(len(states) - 1)
            si += 1
        if new.iterations <= opts.fast_iterations:
            fast += 1
            if fast >= 2:
                h = min(h * schedule.growth, schedule.max_increment)
                fast = 0
        else:
            fast = 0
    return SweepResult(states, sample_index, time.perf_counter() - t0, rejections)


def _increment(model, state, factor, hb, d_new, opts):
    dd = d_new - state.d
    q_prev = state.q
    E0, g0, _ = model.gradient(q_prev, d_new)
    g_ref = np.linalg.norm(g0) if g0 is not None else None
    q_start = q_prev
    if factor is not None and not factor.shifted and factor.negative == 0:
        q_pred = q_prev - factor.solve(hb * dd)
        E_pred = model.energy(q_pred, d_new)
        if np.isfinite(E_pred) and (not np.isfinite(E0) or E_pred < E0):
            q_start = q_pred
    if g_ref is None or not np.isfinite(E0):
        g_ref = None
    return newton_solve(model, d_new, q_start, opts, g_ref=g_ref, return_factor=True)
