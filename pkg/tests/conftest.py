"""Shared fixtures: small meshes and a seeded generator."""

import numpy as np
import pytest

from aledg.mesh import build_criss_mesh

BOX = (0.0, 2.0, 0.0, 2.0)


@pytest.fixture
def topo32():
    """Periodic criss-cross mesh of [0,2]^2 at h0 = 1/2 (32 cells)."""
    return build_criss_mesh(BOX, 0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
