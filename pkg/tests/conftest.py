"""Shared fixtures: small reusable geometries and discrete operators."""

import numpy as np
import pytest

from ecguq.anatomy import concentric_circles, reference_chest, reference_heart
from ecguq.bie import BoundaryGrid, build_system


@pytest.fixture()
def rng():
    # fresh per test so random problems never depend on execution order
    return np.random.default_rng(20260823)


@pytest.fixture(scope="session")
def concentric_ops():
    """Block operators for the unit circle inside the radius-2 circle, n=64."""
    inner, outer = concentric_circles()
    sigma = BoundaryGrid.build(inner, 64, "inner")
    gamma = BoundaryGrid.build(outer, 64, "outer")
    return build_system(sigma, gamma)


@pytest.fixture(scope="session")
def anatomy_ops():
    """Block operators on the built-in anatomy at rest, n=100."""
    sigma = BoundaryGrid.build(reference_heart(0.0), 100, "inner")
    gamma = BoundaryGrid.build(reference_chest(), 100, "outer")
    return build_system(sigma, gamma)
