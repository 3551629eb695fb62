"""Design sensitivities of sweep outputs.

For a loss ``L(SE_1..SE_N, q_1..q_N, theta)`` with every ``q_k`` an
equilibrium (``g_k = dPsi/dq = 0``)::

    dL/dtheta = dL/dtheta|explicit
                + sum_k dL/dSE_k * dPsi_k/dtheta|q
                - sum_k lambda_k . dg_k/dtheta|q,      H_k lambda_k = dL/dq_k

Partial derivatives with respect to the reference geometry are evaluated
analytically per quadrature point and chained through the
design-to-control-point Jacobian; E enters through ``Psi`` being linear in E
at fixed Poisson ratio.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla

from .geometry import DesignParams, geometry_jacobian
from .material import first_piola, material_tangent, strain_energy_density
from .solver import Model

__all__ = [
    "AdjointError",
    "DesignGradient",
    "adjoint_solve",
    "energy_shape_derivative",
    "residual_shape_derivative",
    "energy_design_jacobian",
    "design_gradient",
]


class AdjointError(ArithmeticError):
    """Singular or ill-conditioned Hessian in an adjoint solve."""


@dataclass
class DesignGradient:
    grad: np.ndarray
    names: list
    adjoints: list

    def as_dict(self) -> dict:
        return dict(zip(self.names, self.grad.tolist()))


def adjoint_solve(model: Model, state, dL_du) -> np.ndarray:
    """Solve ``H lambda = dL/du`` at a converged state (H symmetric)."""
    b = np.asarray(dL_du, dtype=float)
    if not np.any(b):
        return np.zeros(model.n_dofs)
    _, _, H, _, _ = model.hessian(state.q, state.d)
    try:
        lu = spla.splu(H.tocsc(), permc_spec="MMD_AT_PLUS_A")
    except RuntimeError as exc:
        raise AdjointError(f"singular Hessian at d={state.d:.4f} cm") from exc
    d = np.abs(lu.U.diagonal())
    if d.min() <= 1e-14 * d.max():
        raise AdjointError(f"ill-conditioned Hessian at d={state.d:.4f} cm "
                           f"(pivot ratio {d.min() / d.max():.2e})")
    return lu.solve(b)


def _kinematics(model: Model, q, d):
    act = model.basis.active
    u = model.local_u(np.asarray(q, dtype=float), float(d))
    Hd = np.einsum("pqai,pqaJ->pqiJ", u[:, act], model.dNdX)
    F = Hd + np.eye(2)
    return F, Hd


def _scatter_points(model: Model, contrib):
    """Sum ``(Pd, nq, k, 2)`` quadrature contributions into ``(P_all, nb, 2)``."""
    act = model.basis.active
    Pd = len(model.def_idx)
    out = np.zeros((model.ps.n_patches, model.nb, 2))
    flat = np.zeros((Pd, model.nb, 2))
    idx = np.broadcast_to(act, contrib.shape[:3])
    for p in range(Pd):
        for c in range(2):
            flat[p, :, c] = np.bincount(idx[p].ravel(), weights=contrib[p, ..., c].ravel(),
                                        minlength=model.nb)
    out[model.def_idx] = flat
    return out


def energy_shape_derivative(model: Model, q, d) -> np.ndarray:
    """``dPsi/dX`` for every reference control point at fixed global dofs.

    ``dPsi/dX_a = sum_q w detG (W I - H^T P) grad_X N_a`` with ``H = F - I``.
    """
    F, Hd = _kinematics(model, q, d)
    W = strain_energy_density(F, model.mat)
    P = first_piola(F, model.mat)
    Sig = W[..., None, None] * np.eye(2) - np.einsum("pqiK,pqiJ->pqKJ", Hd, P)
    contrib = np.einsum("pq,pqKJ,pqaJ->pqaK", model.wdet, Sig, model.dNdX)
    return _scatter_points(model, contrib)


def residual_shape_derivative(model: Model, q, d, lam) -> np.ndarray:
    """``d(lambda . g)/dX`` for every reference control point at fixed dofs."""
    F, Hd = _kinematics(model, q, d)
    act = model.basis.active
    v = np.zeros(model._u_base.size)
    v[model._gsel] = np.asarray(lam, dtype=float)[model._gidx]
    v = v.reshape(len(model.def_idx), model.nb, 2)
    Q = np.einsum("pqai,pqaJ->pqiJ", v[:, act], model.dNdX)
    P = first_piola(F, model.mat)
    A = material_tangent(F, model.mat, flat=False)
    S = np.einsum("pqiJ,pqiJkL->pqkL", Q, A)
    PQ = np.einsum("pqiJ,pqiJ->pq", P, Q)
    M = (PQ[..., None, None] * np.eye(2) - np.einsum("pqkK,pqkJ->pqKJ", Hd, S)
         - np.einsum("pqiK,pqiJ->pqKJ", Q, P))
    contrib = np.einsum("pq,pqKJ,pqaJ->pqaK", model.wdet, M, model.dNdX)
    return _scatter_points(model, contrib)


def _chain(design: DesignParams, Jg, dX, value):
    """Combine a control-point derivative and an E-scaling value into dtheta."""
    out = np.asarray(Jg.T @ dX.reshape(-1)).ravel()
    if design.optimize_E:
        out[-1] = value / design.E
    return out


def energy_design_jacobian(model: Model, design: DesignParams, states, Jg=None) -> np.ndarray:
    """``dSE_k/dtheta`` (rows: states) by the envelope property of equilibria."""
    if Jg is None:
        Jg = geometry_jacobian(design, resolution=model.ps.kv_u.n_basis, degree=model.ps.kv_u.degree,
                               stem_ratio=model.ps.meta.get("stem_ratio", 1.0))
    rows = []
    for st in states:
        dX = energy_shape_derivative(model, st.q, st.d)
        rows.append(_chain(design, Jg, dX, st.energy))
    return np.array(rows).reshape(len(states), design.n_params)


def design_gradient(model: Model, design: DesignParams, states, dL_dSE=None, dL_dq=None,
                    dL_dtheta=None, Jg=None, exact=False) -> DesignGradient:
    """Total derivative of a loss of sweep states with respect to ``theta``.

    ``dL_dSE`` has one entry per state, ``dL_dq`` one global vector (or None)
    per state. With ``exact=True`` the small residual left by the nonlinear
    solver is also accounted for through the adjoint (``dSE/dq = g``).
    """
    n = len(states)
    if Jg is None:
        Jg = geometry_jacobian(design, resolution=model.ps.kv_u.n_basis, degree=model.ps.kv_u.degree,
                               stem_ratio=model.ps.meta.get("stem_ratio", 1.0))
    a = np.zeros(n) if dL_dSE is None else np.asarray(dL_dSE, dtype=float)
    grad = np.zeros(design.n_params) if dL_dtheta is None else np.array(dL_dtheta, dtype=float)
    adjoints = []
    for k, st in enumerate(states):
        if a[k]:
            dX = energy_shape_derivative(model, st.q, st.d)
            grad += a[k] * _chain(design, Jg, dX, st.energy)
        rhs = np.zeros(model.n_dofs)
        if dL_dq is not None and dL_dq[k] is not None:
            rhs += dL_dq[k]
        if exact and a[k]:
            _, g, _ = model.gradient(st.q, st.d)
            rhs += a[k] * g
        lam = adjoint_solve(model, st, rhs)
        adjoints.append(lam)
        if np.any(lam):
            dX = residual_shape_derivative(model, st.q, st.d, lam)
            _, g, _ = model.gradient(st.q, st.d)
            grad -= _chain(design, Jg, dX, float(lam @ g))
    return DesignGradient(grad=grad, names=design.names(), adjoints=adjoints)
