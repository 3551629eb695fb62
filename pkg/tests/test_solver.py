import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from snapiga.geometry import DesignParams, build_dofmap, build_strip
from snapiga.material import lame_parameters
from snapiga.solver import (LoadSchedule, Model, SolverOptions, StepRejected, build_model, greedy_coloring,
                            load_sweep, newton_solve)

from conftest import SINGLE_CELL, perturbed_dofs


@pytest.fixture(scope="module")
def single_sweep(single_cell):
    model = build_model(single_cell)
    res = load_sweep(model, LoadSchedule.uniform(4.0, single_cell.h3[0]))
    return model, res


def free_square(E=70.0, res=4):
    ps = build_strip(n_patches=1, resolution=res, rigid=(), fixed_top=False, length=2.0, height=2.0)
    return Model(ps, build_dofmap(ps), E)


def test_rest_state(coarse_model):
    m = coarse_model
    q0 = np.zeros(m.n_dofs)
    E, g, dpsi = m.gradient(q0, 0.0)
    assert E == 0.0 and dpsi == 0.0
    np.testing.assert_allclose(g, 0.0, atol=1e-14)
    _, _, H, _, _ = m.hessian(q0, 0.0)
    assert np.linalg.eigvalsh(H.toarray()).min() > 0


def test_translation_of_free_body_is_free():
    m = free_square()
    q = np.tile([0.3, -0.7], m.n_dofs // 2)
    assert m.energy(q, 0.0) == pytest.approx(0.0, abs=1e-12)


def test_uniaxial_stretch_matches_linear_elasticity():
    m = free_square()
    eps = 0.01
    X = m.control[0]
    q = np.zeros(m.n_dofs)
    q[0::2] = eps * X[:, 0]  # strip control points are ordered like the single patch
    mat = lame_parameters(70.0)
    exact = 0.5 * (mat.lam + 2 * mat.mu) * eps**2 * 4.0  # area 4 cm^2, 1 cm thick
    assert m.energy(q, 0.0) == pytest.approx(exact, rel=0.01)


def test_gradient_matches_fd(coarse_model, rng):
    m = coarse_model
    q = perturbed_dofs(m, rng)
    d = 0.05
    _, g, dpsi = m.gradient(q, d)
    idx = rng.choice(m.n_dofs, 40, replace=False)
    h = 1e-6
    for i in idx:
        e = np.zeros(m.n_dofs)
        e[i] = h
        fd = (m.energy(q + e, d) - m.energy(q - e, d)) / (2 * h)
        assert fd == pytest.approx(g[i], rel=1e-6, abs=1e-6 * np.abs(g).max())
    fd = (m.energy(q, d + h) - m.energy(q, d - h)) / (2 * h)
    assert fd == pytest.approx(dpsi, rel=1e-6)


def test_rigid_group_gradient_sums_member_contributions(coarse_model, rng):
    m = coarse_model
    q = perturbed_dofs(m, rng)
    _, g, _ = m.gradient(q, 0.02)
    dm = m.dm
    rigid_dofs = np.unique(dm.group_dof[dm.group_rigid].ravel())
    rigid_dofs = rigid_dofs[rigid_dofs >= 0]
    assert rigid_dofs.size > 0
    h = 1e-6
    for i in rigid_dofs[:6]:
        e = np.zeros(m.n_dofs)
        e[i] = h
        fd = (m.energy(q + e, 0.02) - m.energy(q - e, 0.02)) / (2 * h)
        assert fd == pytest.approx(g[i], rel=1e-6, abs=1e-6 * np.abs(g).max())


def test_hessian_matches_fd(coarse_model, rng):
    m = coarse_model
    q = perturbed_dofs(m, rng)
    d = 0.05
    _, _, H, hb, _ = m.hessian(q, d)
    H = H.toarray()
    np.testing.assert_allclose(H, H.T, atol=1e-9 * np.abs(H).max())
    h = 1e-6
    for i in rng.choice(m.n_dofs, 15, replace=False):
        e = np.zeros(m.n_dofs)
        e[i] = h
        fd = (m.gradient(q + e, d)[1] - m.gradient(q - e, d)[1]) / (2 * h)
        np.testing.assert_allclose(H[:, i], fd, rtol=1e-5, atol=1e-5 * np.abs(H[:, i]).max())
    fd = (m.gradient(q, d + h)[1] - m.gradient(q, d - h)[1]) / (2 * h)
    np.testing.assert_allclose(hb, fd, rtol=1e-5, atol=1e-5 * np.abs(hb).max())


def strip_model():
    ps = build_strip(n_patches=4, resolution=4, rigid=(0,), fixed_top=True)
    return Model(ps, build_dofmap(ps), 70.0)


def test_sparsity_excludes_disjoint_patches():
    m = strip_model()
    P = m.sparsity().toarray()
    assert np.array_equal(P, P.T)
    # dofs living only in patch 1 and only in patch 3 never meet
    loc = m.loc
    only = [set(loc[k][loc[k] >= 0]) - set().union(*(set(loc[j][loc[j] >= 0]) for j in range(len(loc)) if j != k))
            for k in range(len(loc))]
    a, b = min(only[0]), min(only[2])
    assert not P[a, b]


def test_coloring_is_distance_two_and_bounded():
    m = strip_model()
    P = m.sparsity()
    colors = greedy_coloring(P)
    for r in range(P.shape[0]):
        cols = P.indices[P.indptr[r]:P.indptr[r + 1]]
        assert len(set(colors[cols])) == cols.size
    max_deg = np.diff(P.indptr).max()
    assert colors.max() + 1 <= max_deg + 1 or colors.max() + 1 <= max_deg**2 + 1


def test_colored_hessian_matches_dense_fd(rng):
    m = strip_model()
    assert m.n_dofs <= 60
    q = 1e-2 * rng.standard_normal(m.n_dofs)
    Hc = m.colored_hessian(q, 0.0).toarray()
    n = m.n_dofs
    Hd = np.zeros((n, n))
    h = 1e-6
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        Hd[:, i] = (m.gradient(q + e, 0.0)[1] - m.gradient(q - e, 0.0)[1]) / (2 * h)
    Hd = 0.5 * (Hd + Hd.T)
    big = np.abs(Hd) > 1e-6 * np.abs(Hd).max()
    np.testing.assert_allclose(Hc[big], Hd[big], rtol=1e-5)
    np.testing.assert_allclose(Hc, Hc.T, atol=1e-9 * np.abs(Hc).max())
    _, _, Ha, _, _ = m.hessian(q, 0.0)
    np.testing.assert_allclose(Hc, Ha.toarray(), rtol=1e-5, atol=1e-6 * np.abs(Hd).max())


def test_hessian_scales_with_E(coarse_model, rng):
    q = perturbed_dofs(coarse_model, rng)
    H1 = coarse_model.hessian(q, 0.03)[2]
    H2 = coarse_model.with_E(2 * coarse_model.mat.E).hessian(q, 0.03)[2]
    np.testing.assert_allclose(H2.data, 2 * H1.data, rtol=1e-12)


def test_inverted_element_rejected(coarse_model):
    q = np.full(coarse_model.n_dofs, -50.0)
    assert coarse_model.energy(q, 0.0) == np.inf
    with pytest.raises(StepRejected):
        coarse_model.hessian(q, 0.0)


def test_newton_rest_converges_immediately(coarse_model):
    st = newton_solve(coarse_model, 0.0, np.zeros(coarse_model.n_dofs))
    assert st.iterations == 0 and st.energy == 0.0 and st.force == 0.0


def tangent_predictor(m, d):
    """Linearized response at rest, the same start the continuation uses."""
    _, _, H, hb, _ = m.hessian(np.zeros(m.n_dofs), 0.0)
    return spla.spsolve(H.tocsc(), -d * hb)


def test_newton_linear_regime_is_quadratic(single_cell):
    m = build_model(single_cell)
    # secant stiffness within 3% of the initial tangent at this load level
    d = 0.02
    q0 = tangent_predictor(m, d)
    st = newton_solve(m, d, q0)
    assert st.iterations <= 3
    assert st.residual <= max(1e-8 * np.linalg.norm(m.gradient(q0, d)[1]), 1e-10)


def test_unreachable_tolerance_stops_at_roundoff(single_cell):
    m = build_model(single_cell)
    d = 0.02
    st = newton_solve(m, d, tangent_predictor(m, d))
    tight = SolverOptions(rtol=0.0, atol=1e-30, max_iter=500)
    try:
        again = newton_solve(m, d, st.q, tight)
    except StepRejected as exc:
        assert "stagnated" in str(exc) or "line search" in str(exc)
    else:
        assert again.iterations < 10 and again.energy <= st.energy


def test_gmres_and_direct_agree(single_cell):
    m = build_model(single_cell)
    d = 0.5
    q0 = tangent_predictor(m, d)
    a = newton_solve(m, d, q0, SolverOptions(linear_solver="direct"))
    b = newton_solve(m, d, q0, SolverOptions(linear_solver="gmres"))
    assert b.energy == pytest.approx(a.energy, rel=1e-9)
    np.testing.assert_allclose(b.q, a.q, atol=1e-7 * np.abs(a.q).max())


def test_schedule_validation():
    with pytest.raises(ValueError):
        LoadSchedule(samples=(0.0, 0.5, 0.4), increment=0.1, min_increment=0.01, max_increment=1)
    with pytest.raises(ValueError):
        LoadSchedule(samples=(0.1, 0.5), increment=0.1, min_increment=0.01, max_increment=1)
    s = LoadSchedule.uniform(4.0, 10.0)
    assert s.increment == 0.25 and s.min_increment == 0.025 and s.max_increment == 1.0


def test_sweep_hits_samples_and_is_bistable(single_sweep):
    from snapiga.analysis import EnergyCurve, stability_report

    _, res = single_sweep
    d, e, f = res.sampled_curve()
    assert d[0] == 0 and d[-1] == pytest.approx(4.0)
    assert np.all([s.residual <= 1e-6 for s in res.states])
    rep = stability_report(EnergyCurve(d, e))
    assert rep.n_stable == 2


def test_tiny_sweep_is_convex_increasing(single_cell):
    m = build_model(single_cell)
    res = load_sweep(m, LoadSchedule.uniform(0.05, single_cell.h3[0], samples=np.linspace(0, 0.05, 6)))
    _, e, _ = res.sampled_curve()
    assert np.all(np.diff(e) > 0) and np.all(np.diff(e, 2) > 0)


def test_reaction_force_matches_energy_slope(single_cell):
    m = build_model(single_cell)
    res = load_sweep(m, LoadSchedule.uniform(2.0, single_cell.h3[0], samples=np.linspace(0, 2.0, 101)))
    d, e, f = res.sampled_curve()
    assert f[0] == 0.0
    fd = 100 * (e[2:] - e[:-2]) / (d[2:] - d[:-2])
    np.testing.assert_allclose(fd, f[1:-1], rtol=0.02)
    st = res.states[len(res.states) // 3]
    h = 1e-5
    fd = 100 * (m.energy(st.q, st.d + h) - m.energy(st.q, st.d - h)) / (2 * h)
    assert m.reaction_force(st.q, st.d) == pytest.approx(fd, rel=1e-6)


def test_energy_maximum_is_unstable_under_load_control(single_sweep):
    """At the energy peak the (q, d) Hessian is indefinite; the q block alone is not."""
    model, res = single_sweep
    e = res.energy
    k = int(np.argmax(e[: int(np.argmin(e[len(e) // 2:])) + len(e) // 2]))
    st = res.states[k]
    _, _, H, hb, dpsi = model.hessian(st.q, st.d)
    h = 1e-6
    kdd = (model.gradient(st.q, st.d + h)[2] - model.gradient(st.q, st.d - h)[2]) / (2 * h)
    A = sp.bmat([[H, hb[:, None]], [hb[None, :], np.array([[kdd]])]]).toarray()
    assert np.linalg.eigvalsh(A).min() < 0
    assert np.linalg.eigvalsh(H.toarray()).min() > 0


def test_halving_increments_preserves_path(single_cell):
    m = build_model(single_cell)
    samples = np.linspace(0, 2.0, 9)
    h3 = single_cell.h3[0]
    a = load_sweep(m, LoadSchedule.uniform(2.0, h3, samples=samples))
    b = load_sweep(m, LoadSchedule.uniform(2.0, h3, n_per_h3=80, samples=samples))
    ea, eb = a.sampled_curve()[1], b.sampled_curve()[1]
    np.testing.assert_allclose(ea[1:], eb[1:], rtol=5e-3)


def test_sweep_is_bit_reproducible(single_cell):
    m = build_model(single_cell, resolution=5)
    s = LoadSchedule.uniform(1.0, single_cell.h3[0])
    a, b = load_sweep(m, s), load_sweep(m, s)
    assert np.array_equal(a.energy, b.energy) and np.array_equal(a.force, b.force)
