import numpy as np
import pytest

from snapiga.geometry import DesignParams
from snapiga.solver import build_model

SINGLE_CELL = dict(L=11.34, t=1.24, h1=4.15, h2=6.28, h3=10.17, tb=(0.28,), E=70.0)
THREE_CELL = dict(L=12.21, t=1.25, h1=5.32, h2=7.24, h3=11.45, tb=(0.21, 0.23, 0.19), E=70.0)


@pytest.fixture(scope="session")
def single_cell():
    return DesignParams(**SINGLE_CELL)


@pytest.fixture(scope="session")
def three_cell():
    return DesignParams(**THREE_CELL)


@pytest.fixture(scope="session")
def coarse_model(single_cell):
    """Single cell on the smallest cubic mesh; cheap enough for dense FD checks."""
    return build_model(single_cell, resolution=5)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def perturbed_dofs(model, rng, scale=2e-3):
    """Small random global displacement that keeps every det F positive."""
    return scale * rng.standard_normal(model.n_dofs)
