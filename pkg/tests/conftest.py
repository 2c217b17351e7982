import numpy as np
import pytest

from heatconf import ManifoldModel, TruncationPolicy, analytic_spectrum, build_embedding

TWO_PI = 2.0 * np.pi


@pytest.fixture(scope="session")
def torus2():
    return ManifoldModel.flat_torus([TWO_PI, TWO_PI])


@pytest.fixture(scope="session")
def circle():
    return ManifoldModel.circle(TWO_PI)


@pytest.fixture(scope="session")
def sphere():
    return ManifoldModel.sphere2(1.0)


@pytest.fixture(scope="session")
def product():
    return ManifoldModel.product_sphere_circle(1.0, TWO_PI)


@pytest.fixture(scope="session")
def torus_embedding(torus2):
    """Shared t = 0.05 torus embedding (q = 400 + shell closure)."""
    provider = analytic_spectrum(torus2, count=600)
    return build_embedding(provider, 0.05, TruncationPolicy(rho=1.0))
