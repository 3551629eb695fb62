"""Post-processing of strain-energy curves: stable states, barriers, collapse order."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_simpson

from .geometry import DesignParams, PatchSet, DofMap, global_to_local

__all__ = [
    "AnalysisError",
    "EnergyCurve",
    "StabilityReport",
    "quadratic_vertex",
    "find_stable_states",
    "energy_barriers",
    "stability_report",
    "collapse_order",
    "simpson_integrate",
    "rigid_patch_error",
    "energy_force_mismatch",
]

J_PER_NCM = 0.01


class AnalysisError(ValueError):
    """Malformed curve or inconsistent inputs."""


@dataclass(frozen=True)
class EnergyCurve:
    d: np.ndarray
    energy: np.ndarray
    force: np.ndarray | None = None

    def __post_init__(self):
        d = np.asarray(self.d, dtype=float)
        e = np.asarray(self.energy, dtype=float)
        if d.ndim != 1 or d.shape != e.shape:
            raise AnalysisError("displacement and energy arrays must be 1-D of equal length")
        if d.size and np.any(np.diff(d) <= 0):
            raise AnalysisError("displacements must increase strictly")
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "energy", e)
        if self.force is not None:
            f = np.asarray(self.force, dtype=float)
            if f.shape != d.shape:
                raise AnalysisError("force array length differs from displacements")
            object.__setattr__(self, "force", f)

    @classmethod
    def from_sweep(cls, result, sampled=True):
        if sampled:
            return cls(*result.sampled_curve())
        return cls(result.d, result.energy, result.force)

    def __len__(self):
        return self.d.size


@dataclass
class StabilityReport:
    locations: np.ndarray
    energies: np.ndarray
    barriers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    releases: np.ndarray = field(default_factory=lambda: np.zeros(0))
    maxima_locations: np.ndarray = field(default_factory=lambda: np.zeros(0))
    collapse_order: list = field(default_factory=list)
    degenerate_order: bool = False

    @property
    def n_stable(self) -> int:
        return self.locations.size

    def as_dict(self) -> dict:
        return dict(stable_locations_cm=self.locations.tolist(),
                    stable_energies_J=self.energies.tolist(),
                    barriers_J=self.barriers.tolist(), releases_J=self.releases.tolist(),
                    maxima_locations_cm=self.maxima_locations.tolist(),
                    collapse_order=list(self.collapse_order),
                    degenerate_order=self.degenerate_order)


def quadratic_vertex(x, y):
    """Vertex of the parabola through three points, with derivatives w.r.t. ``y``.

    Returns ``(xv, yv, dxv_dy, dyv_dy)``.
    """
    x0, x1, x2 = (float(v) for v in x)
    h0, h2 = x0 - x1, x2 - x1
    # y = y1 + b s + c s^2 with s = x - x1; b, c linear in y
    gam = np.array([-1.0 / h0, 1.0 / h0 - 1.0 / h2, 1.0 / h2]) / (h2 - h0)
    beta = np.array([0.0, -1.0 / h2, 1.0 / h2]) - gam * h2
    yv = np.asarray(y, dtype=float)
    b, c = beta @ yv, gam @ yv
    if c == 0.0:
        return x1, yv[1], np.zeros(3), np.array([0.0, 1.0, 0.0])
    xv = x1 - b / (2 * c)
    val = yv[1] - b * b / (4 * c)
    dx = -beta / (2 * c) + b * gam / (2 * c * c)
    dv = np.array([0.0, 1.0, 0.0]) - b * beta / (2 * c) + b * b * gam / (4 * c * c)
    return xv, val, dx, dv


def _check(curve: EnergyCurve):
    if len(curve) < 3:
        raise AnalysisError("need at least 3 samples")


def _minima_idx(e):
    return [i for i in range(1, e.size - 1) if e[i] < e[i - 1] and e[i] < e[i + 1]]


def find_stable_states(curve: EnergyCurve) -> StabilityReport:
    """Stable locations: x=0 plus every strict interior discrete minimum (refined)."""
    return stability_report(curve)


def energy_barriers(curve: EnergyCurve, report: StabilityReport | None = None):
    """``(barriers, releases)`` between consecutive stable states."""
    rep = stability_report(curve)
    return rep.barriers, rep.releases


def stability_report(curve: EnergyCurve, jacobian=False):
    """Stable states, barriers, and releases with quadratic refinement.

    With ``jacobian=True`` also returns a dict of derivative rows with respect
    to the energy samples: ``locations``/``energies`` (interior minima),
    ``barriers`` and ``releases``.
    """
    _check(curve)
    d, e = curve.d, curve.energy
    n = e.size
    idx = _minima_idx(e)
    locs, vals = [d[0]], [e[0]]
    rows_x, rows_v = [np.zeros(n)], [np.eye(n)[0]]
    for i in idx:
        xv, yv, dx, dv = quadratic_vertex(d[i - 1:i + 2], e[i - 1:i + 2])
        locs.append(xv)
        vals.append(yv)
        rx, rv = np.zeros(n), np.zeros(n)
        rx[i - 1:i + 2], rv[i - 1:i + 2] = dx, dv
        rows_x.append(rx)
        rows_v.append(rv)
    min_idx = [0] + idx
    barriers, releases, max_locs, rows_b, rows_r = [], [], [], [], []
    for a, b in zip(min_idx[:-1], min_idx[1:]):
        j = a + 1 + int(np.argmax(e[a + 1:b]))
        if not (e[j] >= e[j - 1] and e[j] >= e[j + 1]):
            raise AnalysisError("no local maximum between consecutive minima")
        if e[j] > e[j - 1] and e[j] > e[j + 1]:
            xm, ym, _, dm = quadratic_vertex(d[j - 1:j + 2], e[j - 1:j + 2])
        else:
            xm, ym, dm = d[j], e[j], np.array([0.0, 1.0, 0.0])
        rm = np.zeros(n)
        rm[j - 1:j + 2] = dm
        k = min_idx.index(a)
        barriers.append(ym - vals[k])
        releases.append(ym - vals[k + 1])
        max_locs.append(xm)
        rows_b.append(rm - rows_v[k])
        rows_r.append(rm - rows_v[k + 1])
    rep = StabilityReport(locations=np.array(locs), energies=np.array(vals),
                          barriers=np.array(barriers), releases=np.array(releases),
                          maxima_locations=np.array(max_locs))
    if not jacobian:
        return rep
    jac = dict(locations=np.array(rows_x).reshape(-1, n), energies=np.array(rows_v).reshape(-1, n),
               barriers=np.array(rows_b).reshape(-1, n), releases=np.array(rows_r).reshape(-1, n))
    return rep, jac


def apex_deflections(states, ps: PatchSet, dm: DofMap) -> np.ndarray:
    """Downward apex deflection of each row's beam relative to its roots, per state."""
    nu, nv = ps.shape
    npp = nu * nv
    ic, jc = nu // 2, nv // 2
    # beam_2 spans the crown; its middle control point sits at the apex
    apex = [ps.index("beam_2", r) * npp + ic * nv + jc for r in range(ps.n_rows)]
    root = [ps.index("wall_l_root", r) * npp + (nu - 1) * nv + jc for r in range(ps.n_rows)]
    out = np.zeros((len(states), ps.n_rows))
    for k, st in enumerate(states):
        u = global_to_local(dm, st.q, st.d)
        out[k] = -(u[apex, 1] - u[root, 1])
    return out


def collapse_order(states, ps: PatchSet, dm: DofMap, design: DesignParams):
    """Rows in the order their apex first passes below its chord.

    Returns ``(order, degenerate)``; ``degenerate`` flags rows that first
    cross at the same increment (ties broken by row index).
    """
    rows = design.row_params()
    thresh = np.array([float(h2 - h1) for (h1, h2, _, _) in rows])
    defl = apex_deflections(states, ps, dm)
    first = {}
    for r in range(ps.n_rows):
        hit = np.flatnonzero(defl[:, r] > thresh[r])
        if hit.size:
            first[r] = int(hit[0])
    order = sorted(first, key=lambda r: (first[r], r))
    steps = [first[r] for r in order]
    degenerate = len(set(steps)) < len(steps)
    return order, degenerate


def simpson_integrate(d, force) -> EnergyCurve:
    """Cumulative energy (J) from a force (N) - displacement (cm) curve.

    Composite Simpson at panel ends; on a uniform grid the odd nodes close
    the last interval with the four-point cubic rule, so every node is exact
    for cubic forces.
    """
    d = np.asarray(d, dtype=float)
    f = np.asarray(force, dtype=float)
    if d.size < 3 or f.shape != d.shape:
        raise AnalysisError("need at least 3 matching force-displacement samples")
    if np.any(np.diff(d) <= 0):
        raise AnalysisError("displacements must increase strictly")
    cum = cumulative_simpson(f, x=d, initial=0.0)
    h = np.diff(d)
    if d.size >= 4 and np.allclose(h, h[0], rtol=1e-9, atol=0.0):
        for i in range(1, d.size, 2):
            lo = min(max(i - 2, 0), d.size - 4)
            xs, ys = d[lo:lo + 4], f[lo:lo + 4]
            coef = np.polyfit(xs - d[i - 1], ys, 3)
            anti = np.polyint(coef)
            cum[i] = cum[i - 1] + np.polyval(anti, d[i] - d[i - 1])
    return EnergyCurve(d, J_PER_NCM * cum, f)


def rigid_patch_error(curve_rigid: EnergyCurve, curve_deformable: EnergyCurve) -> float:
    """``mean |SE_R - SE_D| / max SE_D`` on identical displacement samples."""
    if curve_rigid.d.shape != curve_deformable.d.shape or not np.allclose(
            curve_rigid.d, curve_deformable.d, rtol=0, atol=1e-12):
        raise AnalysisError("curves are sampled at different displacements")
    return float(np.mean(np.abs(curve_rigid.energy - curve_deformable.energy))
                 / np.max(curve_deformable.energy))


def energy_force_mismatch(curve: EnergyCurve) -> float:
    """``max |SE - Simpson(F)| / max SE`` for a curve carrying forces."""
    if curve.force is None:
        raise AnalysisError("curve has no forces")
    integ = simpson_integrate(curve.d, curve.force)
    return float(np.max(np.abs(integ.energy - curve.energy)) / np.max(np.abs(curve.energy)))
