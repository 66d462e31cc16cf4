"""Shared fixtures: small normalized bars, their operators and hinge targets."""
import numpy as np
import pytest

from optctrl.config import get_settings
from optctrl.data import bar_mesh, default_hinge
from optctrl.services.mesh import generate_bend_targets, normalize_unit_sphere
from optctrl.services.operators import assemble_bilaplacian

# Absolute regularization small enough that W 1 = 1 holds to ~1e-10 on the
# test bars; the deflated inverse keeps it well conditioned.
TINY_EPSILON = 1e-14


@pytest.fixture(autouse=True)
def fresh_settings(monkeypatch):
    """Settings are read from a clean environment in every test."""
    for name in ("OPTCTRL_THREADS", "OPTCTRL_CACHE_DIR", "OPTCTRL_LOG_LEVEL", "OPTCTRL_DEBUG"):
        monkeypatch.delenv(name, raising=False)
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


@pytest.fixture(scope="session")
def bar():
    """6 x 2 x 2 cells, N = 63."""
    return normalize_unit_sphere(bar_mesh(6, 2, 2))


@pytest.fixture(scope="session")
def bar_op(bar):
    return assemble_bilaplacian(bar)


@pytest.fixture(scope="session")
def tiny_op(bar):
    return assemble_bilaplacian(bar, epsilon=TINY_EPSILON)


@pytest.fixture(scope="session")
def hinge_targets(bar):
    return generate_bend_targets(bar, 6, 3, default_hinge(bar))


@pytest.fixture(scope="session")
def medium_bar():
    """16 x 3 x 3 cells, N = 272."""
    return normalize_unit_sphere(bar_mesh(16, 3, 3))


@pytest.fixture(scope="session")
def medium_op(medium_bar):
    return assemble_bilaplacian(medium_bar)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
