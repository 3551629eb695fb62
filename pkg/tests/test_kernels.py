import numpy as np
import pytest

from snapiga import _kernels_py, kernels
from snapiga.material import lame_parameters


@pytest.fixture(scope="module")
def inputs(coarse_model):
    m = coarse_model
    rng = np.random.default_rng(7)
    u = 1e-2 * rng.standard_normal((len(m.def_idx), m.nb, 2))
    act = np.ascontiguousarray(m.basis.active, dtype=np.int32)
    mat = lame_parameters(70.0)
    return m.dNdX, act, m.wdet, u, mat.mu, mat.lam


def test_backend_reported():
    assert kernels.BACKEND in ("cython", "python")


@pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled kernels unavailable")
@pytest.mark.parametrize("mode", [0, 1, 2])
def test_compiled_matches_numpy(inputs, mode):
    from snapiga import _kernels

    a = _kernels.assemble(*inputs, mode)
    b = _kernels_py.assemble(*inputs, mode)
    assert a[3] and b[3]
    assert a[0] == pytest.approx(b[0], rel=1e-12)
    if mode >= 1:
        np.testing.assert_allclose(a[1], b[1], rtol=1e-10, atol=1e-12 * np.abs(b[1]).max())
    if mode == 2:
        np.testing.assert_allclose(a[2], b[2], rtol=1e-10, atol=1e-12 * np.abs(b[2]).max())


@pytest.mark.parametrize("impl", ["kernels", "numpy"])
def test_inverted_point_flags_failure(inputs, impl):
    f = kernels.assemble if impl == "kernels" else _kernels_py.assemble
    dNdX, act, wdet, u, mu, lam = inputs
    bad = u.copy()
    bad[..., 1] *= -300.0
    e, _, _, ok = f(dNdX, act, wdet, bad, mu, lam, 1)
    assert not ok and e == np.inf


def test_patch_hessian_is_symmetric(inputs):
    _, _, H, ok = kernels.assemble(*inputs, 2)
    assert ok
    np.testing.assert_allclose(H, np.swapaxes(H, 1, 2), atol=1e-10 * np.abs(H).max())


def test_pure_python_env_var(monkeypatch):
    import importlib

    monkeypatch.setenv("SNAPIGA_PURE_PYTHON", "1")
    mod = importlib.reload(kernels)
    try:
        assert mod.BACKEND == "python"
    finally:
        monkeypatch.delenv("SNAPIGA_PURE_PYTHON")
        importlib.reload(kernels)
