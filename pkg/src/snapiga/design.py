"""Loss functions and the box-constrained design optimizer.

Curve matching uses ``L = ||SE(D) - SE_t(D)||_2`` on a fixed displacement
sampling; extrema matching penalizes stable-state locations and energy
barriers. Gradients come from :mod:`snapiga.adjoint`.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .adjoint import energy_design_jacobian
from .analysis import AnalysisError, EnergyCurve, stability_report
from .material import NU_DEFAULT
from .geometry import (DEFAULT_DEGREE, DEFAULT_RESOLUTION, DesignParams, GeometryError,
                       geometry_jacobian)
from .solver import (LoadSchedule, SolverError, SolverOptions, StepRejected, build_model,
                     load_sweep)

__all__ = [
    "CurveTarget",
    "ExtremaTarget",
    "OptimizerOptions",
    "OptimizationTrace",
    "OptimizationResult",
    "loss_curve",
    "loss_extrema",
    "extrema_residuals",
    "add_gradient",
    "project_box",
    "simulate_curve",
    "evaluate",
    "optimize_design",
    "optimize_catalog",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CurveTarget:
    """Target strain energies (J) at displacements (cm)."""

    d: np.ndarray
    energy: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.d, dtype=float)
        e = np.asarray(self.energy, dtype=float)
        if d.ndim != 1 or d.shape != e.shape or d.size < 2:
            raise ValueError("target needs matching 1-D displacement/energy arrays")
        if d[0] != 0.0 or np.any(np.diff(d) <= 0):
            raise ValueError("target displacements must start at 0 and increase strictly")
        if np.any(e < 0):
            raise ValueError("target energies must be non-negative")
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "energy", e)

    @property
    def samples(self):
        return self.d


@dataclass(frozen=True)
class ExtremaTarget:
    """Target stable locations (cm, starting with 0) and barriers (J)."""

    minima: tuple
    barriers: tuple
    releases: tuple | None = None
    d_max: float | None = None
    n_samples: int = 41
    w_location: float = 1.0
    w_barrier: float = 1.0
    w_release: float = 1.0
    penalty: float = 10.0

    def __post_init__(self):
        m = np.asarray(self.minima, dtype=float)
        b = np.asarray(self.barriers, dtype=float)
        if m.size < 1 or m[0] != 0.0 or np.any(np.diff(m) <= 0):
            raise ValueError("target minima must start at 0 and increase strictly")
        if b.size != m.size - 1 or np.any(b <= 0):
            raise ValueError("need one positive barrier per transition between target minima")
        object.__setattr__(self, "minima", tuple(m.tolist()))
        object.__setattr__(self, "barriers", tuple(b.tolist()))
        if self.releases is not None:
            r = np.asarray(self.releases, dtype=float)
            if r.size != b.size:
                raise ValueError("releases must match barriers in count")
            object.__setattr__(self, "releases", tuple(r.tolist()))
        if self.d_max is None:
            spacing = m[-1] / max(m.size - 1, 1)
            object.__setattr__(self, "d_max", float(m[-1] + 0.5 * spacing))

    @property
    def samples(self):
        return np.linspace(0.0, self.d_max, self.n_samples)


def loss_curve(SE, SE_t):
    """Euclidean misfit and its gradient with respect to ``SE``."""
    r = np.asarray(SE, dtype=float) - np.asarray(SE_t, dtype=float)
    val = float(np.linalg.norm(r))
    grad = r / val if val > 0 else np.zeros_like(r)
    return val, grad


def extrema_residuals(curve: EnergyCurve, spec: ExtremaTarget):
    """Weighted residuals, their Jacobian w.r.t. the energy samples, and the count penalty."""
    if len(curve) == 0:
        raise AnalysisError("empty curve")
    rep, jac = stability_report(curve, jacobian=True)
    want = len(spec.minima) - 1
    have = rep.locations.size - 1
    k = min(want, have)
    res, rows = [], []
    for i in range(1, k + 1):
        w = np.sqrt(spec.w_location)
        res.append(w * (rep.locations[i] - spec.minima[i]))
        rows.append(w * jac["locations"][i])
    for i in range(k):
        w = np.sqrt(spec.w_barrier)
        res.append(w * (rep.barriers[i] - spec.barriers[i]))
        rows.append(w * jac["barriers"][i])
        if spec.releases is not None:
            w = np.sqrt(spec.w_release)
            res.append(w * (rep.releases[i] - spec.releases[i]))
            rows.append(w * jac["releases"][i])
    penalty = spec.penalty * max(want - have, 0)
    return np.array(res), np.array(rows).reshape(len(res), len(curve)), float(penalty)


def loss_extrema(curve: EnergyCurve, spec: ExtremaTarget, with_grad=False):
    """Weighted squared errors of refined minima locations and barriers.

    Missing interior minima add ``spec.penalty`` each; extra minima beyond the
    target count are ignored.
    """
    r, J, penalty = extrema_residuals(curve, spec)
    val = float(r @ r + penalty)
    return (val, 2 * r @ J) if with_grad else val


def project_box(theta, bounds):
    """Clamp each component into its closed interval."""
    b = np.asarray(bounds, dtype=float)
    return np.clip(np.asarray(theta, dtype=float), b[:, 0], b[:, 1])


@dataclass(frozen=True)
class OptimizerOptions:
    alpha: float = 0.05          # initial largest relative parameter change per iteration
    alpha_max: float = 0.2
    max_iter: int = 300
    loss_tol: float = 0.01
    gtol: float = 1e-8
    max_halvings: int = 8
    grow: float = 1.5
    stall_iters: int = 15         # stop if the loss fell by less than stall_rtol over this many iterations
    stall_rtol: float = 1e-3
    method: str = "auto"          # see optimize_design; one of METHODS
    resolution: int = DEFAULT_RESOLUTION
    degree: int = DEFAULT_DEGREE
    increments_per_h3: int = 40
    nu: float = NU_DEFAULT
    solver: SolverOptions = field(default_factory=SolverOptions)


@dataclass
class OptimizationTrace:
    loss: list = field(default_factory=list)
    theta: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    active: list = field(default_factory=list)
    alpha: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)

    def record(self, loss, theta, grad, active, alpha, t):
        self.loss.append(float(loss))
        self.theta.append(np.array(theta, dtype=float))
        self.grad_norm.append(float(np.linalg.norm(grad)))
        self.active.append(np.array(active, dtype=bool))
        self.alpha.append(float(alpha))
        self.wall_time.append(float(t))

    def __len__(self):
        return len(self.loss)


@dataclass
class OptimizationResult:
    design: DesignParams
    trace: OptimizationTrace
    converged: bool
    loss: float
    curve: EnergyCurve
    reason: str = ""
    attempts: list = field(default_factory=list)

    @property
    def iterations(self) -> int:
        """Accepted steps summed over all attempts."""
        return sum(a["iterations"] for a in self.attempts)


def _schedule(design: DesignParams, samples, per_h3):
    h3 = min(float(h) for h in design.h3)
    samples = np.asarray(samples, dtype=float)
    inc = min(h3 / per_h3, float(np.min(np.diff(samples))))
    return LoadSchedule(samples=tuple(samples), increment=inc, min_increment=min(h3 / 400, inc),
                        max_increment=max(h3 / 10, inc))


def simulate_curve(design: DesignParams, samples, resolution=DEFAULT_RESOLUTION, degree=DEFAULT_DEGREE,
                   opts: SolverOptions | None = None, per_h3=40, rigid=True, nu=NU_DEFAULT):
    """Sweep a design through ``samples``; returns ``(EnergyCurve, model, SweepResult)``."""
    model = build_model(design, resolution=resolution, degree=degree, rigid=rigid, nu=nu)
    res = load_sweep(model, _schedule(design, samples, per_h3), opts)
    return EnergyCurve.from_sweep(res), model, res


def evaluate(design: DesignParams, target, options: OptimizerOptions | None = None, need_grad=True):
    """Loss, gradient, residual Jacobian pieces, and the simulated curve at a design."""
    options = options or OptimizerOptions()
    curve, model, res = simulate_curve(design, target.samples, options.resolution, options.degree,
                                       options.solver, options.increments_per_h3, nu=options.nu)
    if isinstance(target, CurveTarget):
        val, dL_dSE = loss_curve(curve.energy, target.energy)
        resid, dr_dSE = curve.energy - target.energy, None
    else:
        resid, dr_dSE, penalty = extrema_residuals(curve, target)
        val, dL_dSE = float(resid @ resid + penalty), 2 * resid @ dr_dSE
    out = dict(loss=val, curve=curve, dL_dSE=dL_dSE, result=res, resid=resid,
               _model=model, _dr_dSE=dr_dSE, _design=design)
    if need_grad:
        add_gradient(out, options)
    return out


def add_gradient(ev: dict, options: OptimizerOptions) -> dict:
    """Fill ``dSE``, ``grad`` and ``resid_jac`` of an :func:`evaluate` result in place."""
    model, design = ev["_model"], ev["_design"]
    Jg = geometry_jacobian(design, resolution=options.resolution, degree=options.degree,
                           stem_ratio=model.ps.meta["stem_ratio"])
    dSE = energy_design_jacobian(model, design, ev["result"].samples(), Jg)
    ev["dSE"] = dSE
    ev["grad"] = ev["dL_dSE"] @ dSE
    ev["resid_jac"] = dSE if ev["_dr_dSE"] is None else ev["_dr_dSE"] @ dSE
    return ev


def _active(theta, grad, bounds, tol=1e-12):
    lo, hi = bounds[:, 0], bounds[:, 1]
    span = np.maximum(np.abs(theta), 1.0)
    at_lo = (theta - lo <= tol * span) & (grad > 0)
    at_hi = (hi - theta <= tol * span) & (grad < 0)
    return at_lo | at_hi


def _trust_region_step(J, r, radius):
    """Levenberg-Marquardt step ``-(J^T J + lam I)^-1 J^T r`` with ``||step|| <= radius``."""
    U, s, Vt = np.linalg.svd(J, full_matrices=False)
    c = U.T @ r

    def step(lam):
        return -Vt.T @ (s * c / (s * s + lam))

    keep = s > 1e-12 * s.max() if s.size and s.max() > 0 else np.zeros(s.size, bool)
    z = -Vt[keep].T @ (c[keep] / s[keep])
    if np.linalg.norm(z) <= radius:
        return z
    lo, hi = 0.0, max(float(s.max()) ** 2, 1e-300)
    while np.linalg.norm(step(hi)) > radius:
        hi *= 10.0
    for _ in range(60):
        mid = np.sqrt(lo * hi) if lo > 0 else hi * 1e-8
        if np.linalg.norm(step(mid)) > radius:
            lo = mid
        else:
            hi = mid
        if lo > 0 and hi / lo < 1.01:
            break
    return step(hi)


METHODS = ("auto", "levenberg-marquardt", "gauss-newton", "scaled-gradient")


def _step(theta, ev, scale, alpha, method, active):
    """Candidate update in parameters scaled by ``scale``, of size at most ``alpha``.

    ``levenberg-marquardt`` solves the damped least-squares problem inside a
    2-norm radius ``alpha``; ``gauss-newton`` takes the undamped direction and
    caps its largest scaled component at ``alpha``; ``scaled-gradient`` moves
    the largest scaled gradient component by exactly ``alpha``.
    """
    if method != "scaled-gradient" and ev["resid"].size:
        J = ev["resid_jac"] * scale
        J[:, active] = 0.0
        if method == "levenberg-marquardt":
            z = _trust_region_step(J, ev["resid"], alpha)
        else:
            z = _trust_region_step(J, ev["resid"], np.inf)
            zmax = np.abs(z).max()
            if zmax > alpha:
                z *= alpha / zmax
    else:
        z = -scale * ev["grad"]
        z[active] = 0.0
        zmax = np.abs(z).max()
        if zmax == 0:
            return theta.copy()
        z *= alpha / zmax
    return theta + scale * z


def _descend(design0, target, options, method, max_iter, callback, it0=0):
    bounds = design0.bounds_array()
    theta = project_box(design0.to_vector(), bounds)
    design = design0.with_vector(theta)
    design.validate()
    scale = np.abs(design0.to_vector())
    scale[scale == 0] = 1.0
    trace = OptimizationTrace()
    t0 = time.perf_counter()
    ev = evaluate(design, target, options)
    alpha = options.alpha
    reason = "max_iter"
    for it in range(max_iter + 1):
        act = _active(theta, ev["grad"], bounds)
        trace.record(ev["loss"], theta, ev["grad"], act, alpha, time.perf_counter() - t0)
        if callback is not None:
            callback(it0 + it, ev, design)
        log.info("%s iter %d loss %.6g |g| %.3e alpha %.3g", method, it, ev["loss"],
                 np.linalg.norm(ev["grad"]), alpha)
        if ev["loss"] < options.loss_tol:
            reason = "loss_tol"
            break
        g_free = ev["grad"].copy()
        g_free[act] = 0.0
        if np.linalg.norm(g_free * scale) < options.gtol:
            reason = "gtol"
            break
        if it == max_iter:
            break
        k = options.stall_iters
        if k and it >= k and trace.loss[it - k] - ev["loss"] <= options.stall_rtol * trace.loss[it - k]:
            reason = "stalled"
            break
        accepted, a = False, alpha
        for _ in range(options.max_halvings + 1):
            cand = project_box(_step(theta, ev, scale, a, method, act), bounds)
            try:
                d_new = design.with_vector(cand)
                d_new.validate()
                ev_new = evaluate(d_new, target, options, need_grad=False)
            except (GeometryError, SolverError, StepRejected, AnalysisError) as exc:
                log.debug("candidate rejected: %s", exc)
                a *= 0.5
                continue
            if ev_new["loss"] < ev["loss"]:
                accepted = True
                break
            a *= 0.5
        if not accepted:
            reason = "stalled"
            break
        theta, design, ev = cand, d_new, add_gradient(ev_new, options)
        alpha = min(a * options.grow, options.alpha_max) if a == alpha else a
    return OptimizationResult(design=design, trace=trace, converged=reason in ("loss_tol", "gtol"),
                              loss=ev["loss"], curve=ev["curve"], reason=reason,
                              attempts=[dict(method=method, reason=reason, loss=ev["loss"],
                                             iterations=len(trace) - 1)])


def optimize_design(design0: DesignParams, target, options: OptimizerOptions | None = None,
                    callback=None) -> OptimizationResult:
    """Box-projected descent on parameters scaled by their starting magnitudes.

    Every iteration proposes one step (see ``method`` below) of scaled size
    ``alpha``. A candidate that fails to build or to sweep, or that does not
    lower the loss, halves the step. A step accepted at full size grows
    ``alpha`` by ``grow``, up to ``alpha_max``. A run stops as ``"stalled"``
    when the loss improves by less than ``stall_rtol`` over ``stall_iters``
    iterations.

    ``method="auto"`` (default) runs Levenberg-Marquardt first. If that run
    stalls above ``loss_tol``, it restarts from ``design0`` with the capped
    undamped Gauss-Newton step, and both runs share ``max_iter``. The damped
    step copes with parameters the loss barely sees but can settle in shallow
    local minima; the undamped direction keeps its heading far from the
    target. The better of the two runs is returned, and ``result.attempts``
    lists both.
    """
    options = options or OptimizerOptions()
    if options.method not in METHODS:
        raise ValueError(f"unknown method {options.method!r}; expected one of {METHODS}")
    if options.method != "auto":
        return _descend(design0, target, options, options.method, options.max_iter, callback)
    first = _descend(design0, target, options, "levenberg-marquardt", options.max_iter, callback)
    used = len(first.trace) - 1
    if first.converged or first.reason != "stalled" or used >= options.max_iter:
        return first
    log.info("levenberg-marquardt stalled at loss %.4g; restarting with gauss-newton", first.loss)
    second = _descend(design0, target, options, "gauss-newton", options.max_iter - used - 1, callback,
                      it0=used + 1)
    best = second if second.loss < first.loss else first
    best.attempts = first.attempts + second.attempts
    return best


def optimize_catalog(design0: DesignParams, target, catalog, options: OptimizerOptions | None = None):
    """Separate runs at each catalog modulus; returns ``(best, all results)``."""
    results = []
    for E in catalog:
        d0 = replace(design0, E=float(E), optimize_E=False,
                     bounds=None if design0.bounds is None else
                     tuple(design0.bounds[:design0.n_geometric]))
        results.append(optimize_design(d0, target, options))
    best = min(results, key=lambda r: r.loss)
    return best, results
