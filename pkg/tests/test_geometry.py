import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given, settings
from hypothesis import strategies as st

from snapiga.geometry import (CELL_PATCHES, RIGID_PATCHES, DesignParams, GeometryError,
                              assemble_structure, beam_centerline, build_dofmap, build_strip,
                              build_unit_cell, edge_indices, geometry_jacobian, global_to_local,
                              local_to_global, structure_control, transfer_matrix)

from conftest import SINGLE_CELL, THREE_CELL


@pytest.mark.parametrize("n,mode,optE,expect", [
    (1, "identical", False, 6), (3, "identical", False, 8), (2, "non-identical", False, 10),
    (2, "non-identical", True, 11), (3, "non-identical", False, 14)])
def test_parameter_counts(n, mode, optE, expect):
    k = 1 if mode == "identical" else n
    d = DesignParams(L=12, t=1, h1=(5,) * k, h2=(7,) * k, h3=(10,) * k, tb=(0.2,) * n,
                     mode=mode, optimize_E=optE)
    assert d.n_params == expect == len(d.names()) == d.to_vector().size


def test_vector_round_trip(three_cell):
    v = three_cell.to_vector()
    assert np.array_equal(three_cell.with_vector(v).to_vector(), v)
    rows = three_cell.row_params()
    assert [r[3] for r in rows] == [0.21, 0.23, 0.19]


@pytest.mark.parametrize("change,rule", [
    (dict(tb=(4.2,)), "t_beam < h1"),
    (dict(h2=(4.0,)), "h2 > h1"),
    (dict(L=4.0), "L > 4t"),
    (dict(h3=(6.3,)), "h3 > h2"),
    (dict(t=-1.0), "t > 0"),
    (dict(tb=(1.5,), h2=(8.0,)), "curvature"),
])
def test_validation_names_violated_rule(change, rule):
    d = replace(DesignParams(**SINGLE_CELL), **change)
    with pytest.raises(GeometryError, match=rule.split()[0]):
        d.validate()


def test_bounds_shape_checked():
    with pytest.raises(GeometryError):
        DesignParams(**SINGLE_CELL, bounds=((0, 1),))


def test_beam_centerline_shape():
    L, t, h1, h2 = 11.34, 1.24, 4.15, 6.28
    span = L - 4 * t
    x = np.linspace(0, span, 11)
    w = beam_centerline(h1, h2, L, t, x)
    assert w[0] == 0 and w[-1] == pytest.approx(0, abs=1e-12)
    assert w.max() == pytest.approx(h2 - h1)
    np.testing.assert_allclose(w, w[::-1], atol=1e-12)
    with pytest.raises(GeometryError):
        beam_centerline(h1, h2, L, t, span * 1.1)


def test_patch_layout(three_cell):
    ps, _ = assemble_structure(three_cell)
    assert ps.n_patches == 18 * 3
    assert np.count_nonzero(ps.rigid_mask()) == 9 * 3
    assert set(RIGID_PATCHES) <= set(CELL_PATCHES)


@pytest.mark.parametrize("params,rigid,expect", [
    (SINGLE_CELL, True, 692), (SINGLE_CELL, False, 1388),
    (THREE_CELL, True, 2078), (THREE_CELL, False, 4284)])
def test_dof_counts(params, rigid, expect):
    _, dm = assemble_structure(DesignParams(**params), rigid=rigid)
    assert dm.n_dofs == expect


def test_rigid_patches_cut_dofs_by_more_than_40_percent(single_cell):
    n_r = assemble_structure(single_cell, rigid=True)[1].n_dofs
    n_d = assemble_structure(single_cell, rigid=False)[1].n_dofs
    assert 1 - n_r / n_d > 0.4


def test_strip_dof_count():
    ps = build_strip(n_patches=4, resolution=4, rigid=(0,), fixed_top=True)
    assert build_dofmap(ps).n_dofs == 54


def test_cell_height_and_width(three_cell):
    ps, _ = assemble_structure(three_cell)
    X = ps.control_array().reshape(-1, 2)
    assert X[:, 0].min() == pytest.approx(0) and X[:, 0].max() == pytest.approx(three_cell.L)
    assert X[:, 1].max() == pytest.approx(3 * (three_cell.t + three_cell.h3[0]))


def test_interfaces_are_conforming(three_cell):
    ps, _ = assemble_structure(three_cell)
    nu, nv = ps.shape
    for itf in ps.interfaces:
        a = ps.patches[itf.a].control.reshape(-1, 2)[edge_indices(itf.side_a, nu, nv)]
        b = ps.patches[itf.b].control.reshape(-1, 2)[edge_indices(itf.side_b, nu, nv)]
        if itf.reversed:
            b = b[::-1]
        assert np.array_equal(a, b)


def test_unit_cell_builder_matches_structure(single_cell):
    ps1 = build_unit_cell((4.15, 6.28, 10.17, 0.28), 11.34, 1.24)
    ps2, _ = assemble_structure(single_cell)
    np.testing.assert_allclose(ps1.control_array(), ps2.control_array())


def test_dirichlet_and_constraint_groups(single_cell, rng):
    ps, dm = assemble_structure(single_cell)
    q = rng.standard_normal(dm.n_dofs)
    d = 0.7
    u = global_to_local(dm, q, d)
    nu, nv = ps.shape
    npp = nu * nv
    bottom = ps.index("bar_0", 0) * npp + edge_indices("v0", nu, nv)
    np.testing.assert_array_equal(u[bottom], 0.0)
    top = ps.index("stem_1", 0) * npp + edge_indices("v1", nu, nv)
    np.testing.assert_allclose(u[top], [[0.0, -d]] * nv)
    left = ps.index("wall_l_root", 0) * npp + edge_indices("u0", nu, nv)
    np.testing.assert_array_equal(u[left, 0], 0.0)
    # a rigid patch translates as a whole
    k = ps.index("wall_l_low", 0)
    blk = u[k * npp:(k + 1) * npp]
    np.testing.assert_array_equal(blk, np.broadcast_to(blk[0], blk.shape))
    # round trip and transfer matrix
    assert np.array_equal(local_to_global(dm, u), q)
    T = transfer_matrix(dm)
    np.testing.assert_allclose(T @ q + d * dm.local_coef, u.ravel())


def test_geometry_jacobian_matches_fd(three_cell):
    J = geometry_jacobian(three_cell).toarray()
    th = three_cell.to_vector()
    for k in range(th.size):
        h = 1e-6 * max(1.0, abs(th[k]))
        tp, tm = th.copy(), th.copy()
        tp[k] += h
        tm[k] -= h
        fd = (structure_control(three_cell, tp) - structure_control(three_cell, tm)).ravel() / (2 * h)
        scale = np.abs(fd).max()
        assert np.abs(J[:, k] - fd).max() <= 1e-6 * scale, three_cell.names()[k]


def test_geometry_jacobian_E_column_is_zero():
    d = DesignParams(**SINGLE_CELL, optimize_E=True)
    J = geometry_jacobian(d)
    assert J.shape[1] == d.n_params
    assert J[:, -1].nnz == 0


@settings(max_examples=10, deadline=None)
@given(st.floats(0.15, 0.35), st.floats(1.5, 2.5), st.floats(10.5, 13.0))
def test_valid_designs_build_with_positive_jacobians(tb, rise, L):
    from snapiga.solver import build_model

    d = DesignParams(L=L, t=1.2, h1=4.5, h2=4.5 + rise, h3=10.0, tb=(tb,))
    m = build_model(d, resolution=5)
    assert np.all(m.wdet > 0)
