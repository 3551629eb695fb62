"""Compressible neo-Hookean law for 2x2 deformation gradients.

Stored energy per unit reference volume::

    W(F) = mu/2 (I1 - 2 - 2 ln J) + lam/2 (ln J)^2

with ``I1 = tr(F^T F)`` and ``J = det F``. Every function is vectorized over
leading axes: ``F`` has shape ``(..., 2, 2)``.

Units: moduli in MPa, so ``W`` is in MPa = J/cm^3.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "MaterialParams",
    "InvertedElementError",
    "lame_parameters",
    "strain_energy_density",
    "first_piola",
    "material_tangent",
]

NU_DEFAULT = 0.46


class InvertedElementError(ArithmeticError):
    """det F <= 0 somewhere; callers treat this as a rejected step."""


@dataclass(frozen=True)
class MaterialParams:
    E: float
    nu: float
    mu: float
    lam: float


def lame_parameters(E: float, nu: float = NU_DEFAULT) -> MaterialParams:
    if not E > 0:
        raise ValueError(f"Young's modulus must be positive, got {E}")
    if nu >= 0.5:
        raise ValueError(f"nu={nu} reaches the incompressible limit (lambda -> inf)")
    if nu <= 0:
        raise ValueError(f"nu must be in (0, 0.5), got {nu}")
    mu = E / (2.0 * (1.0 + nu))
    lam = nu * E / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return MaterialParams(E=E, nu=nu, mu=mu, lam=lam)


def _det_inv(F):
    J = F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
    if np.any(np.real(J) <= 0):
        raise InvertedElementError("deformation gradient with det F <= 0")
    Finv = np.empty_like(F)
    Finv[..., 0, 0] = F[..., 1, 1] / J
    Finv[..., 1, 1] = F[..., 0, 0] / J
    Finv[..., 0, 1] = -F[..., 0, 1] / J
    Finv[..., 1, 0] = -F[..., 1, 0] / J
    return J, Finv


def strain_energy_density(F, mat: MaterialParams):
    F = np.asarray(F)
    J, _ = _det_inv(F)
    lnJ = np.log(J)
    I1 = np.einsum("...ij,...ij->...", F, F)
    return 0.5 * mat.mu * (I1 - 2.0 - 2.0 * lnJ) + 0.5 * mat.lam * lnJ**2


def first_piola(F, mat: MaterialParams):
    """P = mu (F - F^-T) + lam ln(J) F^-T."""
    F = np.asarray(F)
    J, Finv = _det_inv(F)
    FinvT = np.swapaxes(Finv, -1, -2)
    lnJ = np.log(J)[..., None, None]
    return mat.mu * (F - FinvT) + mat.lam * lnJ * FinvT


def material_tangent(F, mat: MaterialParams, flat: bool = True):
    """dP/dF as ``A[..., i, J, k, L]`` (or flattened ``(..., 4, 4)``).

    Row/column ordering of the flat form is ``2*i + J``.
    """
    F = np.asarray(F)
    J, Finv = _det_inv(F)
    lnJ = np.log(J)[..., None, None, None, None]
    eye = np.eye(2)
    A = mat.mu * np.einsum("ik,JL->iJkL", eye, eye)
    A = A + (mat.mu - mat.lam * lnJ) * np.einsum("...Jk,...Li->...iJkL", Finv, Finv)
    A = A + mat.lam * np.einsum("...Ji,...Lk->...iJkL", Finv, Finv)
    if flat:
        return A.reshape(A.shape[:-4] + (4, 4))
    return A
