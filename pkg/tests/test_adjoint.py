import numpy as np
import pytest
from dataclasses import replace

from snapiga.adjoint import (adjoint_solve, design_gradient, energy_design_jacobian,
                             energy_shape_derivative, residual_shape_derivative)
from snapiga.design import CurveTarget, evaluate, simulate_curve
from snapiga.geometry import DesignParams, geometry_jacobian
from snapiga.solver import SolverOptions, build_model, load_sweep, LoadSchedule

from conftest import SINGLE_CELL

TIGHT = SolverOptions(rtol=1e-12, atol=1e-12)
SAMPLES = np.linspace(0.0, 1.5, 7)


def sweep(design, res=7):
    return simulate_curve(design, SAMPLES, resolution=res, opts=TIGHT)


def fd_step(v):
    return 1e-5 * max(abs(v), 1.0)


@pytest.fixture(scope="module")
def base():
    d = DesignParams(**SINGLE_CELL, optimize_E=True)
    curve, model, res = sweep(d)
    return d, curve, model, res


def test_energy_shape_derivative_at_fixed_dofs(base):
    d, _, model, res = base
    st = res.samples()[-1]
    Jg = geometry_jacobian(d)
    dX = energy_shape_derivative(model, st.q, st.d)
    grad = np.asarray(Jg.T @ dX.reshape(-1)).ravel()
    th = d.to_vector()
    for k in range(d.n_geometric):
        h = fd_step(th[k])
        tp, tm = th.copy(), th.copy()
        tp[k] += h
        tm[k] -= h
        ep = build_model(d.with_vector(tp)).energy(st.q, st.d)
        em = build_model(d.with_vector(tm)).energy(st.q, st.d)
        assert grad[k] == pytest.approx((ep - em) / (2 * h), rel=1e-6, abs=1e-8), d.names()[k]


def test_residual_shape_derivative_at_fixed_dofs(base, rng):
    d, _, model, res = base
    st = res.samples()[3]
    lam = rng.standard_normal(model.n_dofs)
    Jg = geometry_jacobian(d)
    dX = residual_shape_derivative(model, st.q, st.d, lam)
    grad = np.asarray(Jg.T @ dX.reshape(-1)).ravel()
    th = d.to_vector()
    for k in range(d.n_geometric):
        h = fd_step(th[k])
        tp, tm = th.copy(), th.copy()
        tp[k] += h
        tm[k] -= h
        gp = build_model(d.with_vector(tp)).gradient(st.q, st.d)[1]
        gm = build_model(d.with_vector(tm)).gradient(st.q, st.d)[1]
        fd = lam @ (gp - gm) / (2 * h)
        assert grad[k] == pytest.approx(fd, rel=1e-6, abs=1e-8 * np.abs(grad).max()), d.names()[k]


def test_adjoint_solve_inverts_hessian(base, rng):
    _, _, model, res = base
    st = res.samples()[2]
    b = rng.standard_normal(model.n_dofs)
    lam = adjoint_solve(model, st, b)
    H = model.hessian(st.q, st.d)[2]
    np.testing.assert_allclose(H @ lam, b, atol=1e-8 * np.abs(b).max())
    assert not np.any(adjoint_solve(model, st, np.zeros(model.n_dofs)))


def test_energy_design_jacobian_vs_resweep(base):
    d, curve, model, res = base
    J = energy_design_jacobian(model, d, res.samples())
    th = d.to_vector()
    for k in range(d.n_params):
        h = fd_step(th[k])
        tp, tm = th.copy(), th.copy()
        tp[k] += h
        tm[k] -= h
        fd = (sweep(d.with_vector(tp))[0].energy - sweep(d.with_vector(tm))[0].energy) / (2 * h)
        np.testing.assert_allclose(J[:, k], fd, rtol=1e-4, atol=1e-4 * np.abs(fd).max(),
                                   err_msg=d.names()[k])


def test_curve_loss_gradient_end_to_end():
    d0 = DesignParams(**SINGLE_CELL, optimize_E=True)
    target_design = d0.with_vector(d0.to_vector() * np.array([1.02, 0.98, 1.01, 1.0, 1.0, 1.03, 0.95]))
    tgt = CurveTarget(SAMPLES, sweep(target_design)[0].energy)
    from snapiga.design import OptimizerOptions

    opts = OptimizerOptions(solver=TIGHT)
    ev = evaluate(d0, tgt, opts)
    th = d0.to_vector()
    for k in range(d0.n_params):
        h = fd_step(th[k])
        tp, tm = th.copy(), th.copy()
        tp[k] += h
        tm[k] -= h
        lp = evaluate(d0.with_vector(tp), tgt, opts, need_grad=False)["loss"]
        lm = evaluate(d0.with_vector(tm), tgt, opts, need_grad=False)["loss"]
        assert ev["grad"][k] == pytest.approx((lp - lm) / (2 * h), rel=1e-4,
                                              abs=1e-6 * np.abs(ev["grad"]).max()), d0.names()[k]


def test_displacement_loss_gradient_uses_adjoint(base):
    """Loss on a displacement (not an energy) needs the adjoint term."""
    d, _, model, res = base
    states = res.samples()
    k, dof = len(states) - 1, int(np.argmax(np.abs(states[-1].q)))
    dL_dq = [None] * len(states)
    e = np.zeros(model.n_dofs)
    e[dof] = 1.0
    dL_dq[k] = e
    g = design_gradient(model, d, states, dL_dq=dL_dq).grad
    th = d.to_vector()
    for j in range(d.n_params):
        h = fd_step(th[j])
        tp, tm = th.copy(), th.copy()
        tp[j] += h
        tm[j] -= h
        qp = sweep(d.with_vector(tp))[2].samples()[k].q[dof]
        qm = sweep(d.with_vector(tm))[2].samples()[k].q[dof]
        assert g[j] == pytest.approx((qp - qm) / (2 * h), rel=1e-4, abs=1e-6 * np.abs(g).max()), d.names()[j]


def test_energy_is_linear_in_E(base):
    d, curve, model, res = base
    d2 = replace(d, E=2 * d.E)
    c2 = sweep(d2)[0]
    np.testing.assert_allclose(c2.energy, 2 * curve.energy, rtol=1e-8, atol=1e-12)
