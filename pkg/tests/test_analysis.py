import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snapiga.analysis import (AnalysisError, EnergyCurve, energy_force_mismatch, quadratic_vertex,
                              rigid_patch_error, simpson_integrate, stability_report)


def double_well(n=41, d_max=9.0):
    d = np.linspace(0, d_max, n)
    e = 0.05 * d + 0.2 * np.sin(d) ** 2
    return EnergyCurve(d, e)


def test_quadratic_vertex_exact_for_parabola():
    x = np.array([0.7, 1.1, 1.6])
    y = 2.0 * (x - 1.23) ** 2 + 0.4
    xv, yv, dx, dv = quadratic_vertex(x, y)
    assert xv == pytest.approx(1.23) and yv == pytest.approx(0.4)
    h = 1e-7
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        xp, yp, _, _ = quadratic_vertex(x, y + e)
        xm, ym, _, _ = quadratic_vertex(x, y - e)
        assert dx[i] == pytest.approx((xp - xm) / (2 * h), rel=1e-6)
        assert dv[i] == pytest.approx((yp - ym) / (2 * h), rel=1e-6, abs=1e-9)


def test_convex_curve_has_only_rest_state():
    d = np.linspace(0, 4, 17)
    rep = stability_report(EnergyCurve(d, d**2))
    assert rep.locations.tolist() == [0.0]
    assert rep.barriers.size == 0


def test_double_well_minima_and_barriers():
    c = double_well(n=181)
    rep = stability_report(c)
    # minima of 0.05 d + 0.2 sin^2 d: sin(2d) = -0.25
    exact = [(np.pi - 0.5 * np.arcsin(0.25)) + k * np.pi for k in range(2)]
    np.testing.assert_allclose(rep.locations[1:], exact, atol=2e-3)
    assert rep.n_stable == 3
    assert np.all(rep.barriers > 0) and np.all(rep.releases > 0)
    assert np.all(rep.maxima_locations[:-1] < rep.locations[2:])


def test_report_jacobian_matches_fd():
    c = double_well()
    rep, jac = stability_report(c, jacobian=True)
    h = 1e-7
    rng = np.random.default_rng(3)
    v = rng.standard_normal(len(c))
    p = stability_report(EnergyCurve(c.d, c.energy + h * v))
    m = stability_report(EnergyCurve(c.d, c.energy - h * v))
    for key, a, b in (("locations", p.locations, m.locations), ("barriers", p.barriers, m.barriers),
                      ("releases", p.releases, m.releases)):
        np.testing.assert_allclose(jac[key] @ v, (a - b) / (2 * h), rtol=1e-5, atol=1e-8)


def test_too_short_curve_rejected():
    with pytest.raises(AnalysisError):
        stability_report(EnergyCurve([0, 1], [0, 1]))
    with pytest.raises(AnalysisError):
        EnergyCurve([0, 1, 0.5], [0, 1, 2])


@pytest.mark.parametrize("n", [5, 6, 11, 12])
def test_simpson_exact_for_cubic_force(n):
    d = np.linspace(0, 3, n)
    f = 2 - d + 0.5 * d**2 - 0.3 * d**3  # N
    exact = 0.01 * (2 * d - d**2 / 2 + d**3 / 6 - 0.075 * d**4)  # J
    c = simpson_integrate(d, f)
    np.testing.assert_allclose(c.energy, exact, atol=1e-13)


def test_simpson_nonuniform_grid_converges():
    d = np.sort(np.concatenate([[0, 2], np.random.default_rng(0).uniform(0, 2, 60)]))
    c = simpson_integrate(d, np.cos(d))
    np.testing.assert_allclose(c.energy, 0.01 * np.sin(d), atol=1e-6)


def test_energy_force_mismatch_of_consistent_curve():
    d = np.linspace(0, 2, 21)
    f = 30 * np.sin(d)
    c = EnergyCurve(d, 0.3 * (1 - np.cos(d)), f)
    assert energy_force_mismatch(c) < 1e-4
    with pytest.raises(AnalysisError):
        energy_force_mismatch(EnergyCurve(d, c.energy))


def test_rigid_patch_error_definition():
    d = np.linspace(0, 1, 5)
    ref = EnergyCurve(d, np.array([0, 1, 2, 1, 3.0]))
    other = EnergyCurve(d, ref.energy + np.array([0, 0.1, -0.1, 0.2, 0.1]))
    assert rigid_patch_error(other, ref) == pytest.approx(np.mean([0, 0.1, 0.1, 0.2, 0.1]) / 3)
    with pytest.raises(AnalysisError):
        rigid_patch_error(EnergyCurve(d + 0.1, ref.energy), ref)


@settings(max_examples=40)
@given(st.floats(0.0, 5.0), st.floats(0.1, 2.0))
def test_shift_invariance_of_barriers(offset, gain):
    c = double_well()
    a = stability_report(c)
    b = stability_report(EnergyCurve(c.d, gain * c.energy + offset))
    np.testing.assert_allclose(b.locations, a.locations, atol=1e-9)
    np.testing.assert_allclose(b.barriers, gain * a.barriers, rtol=1e-9)
