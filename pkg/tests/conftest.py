import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from conheat import (TangentStencil, build_laplacians, eigendecompose, estimate_frames,  # noqa: E402
                     generate_manifold)

# reproducible property runs: fixed example sequence, no example database
settings.register_profile("repo", derandomize=True, database=None, deadline=None)
settings.load_profile("repo")


@pytest.fixture(scope="session")
def circle():
    return generate_manifold("circle", 128)


@pytest.fixture(scope="session")
def small_torus():
    M = generate_manifold("flat_torus", 32)
    return M, estimate_frames(M)


@pytest.fixture(scope="session")
def small_torus_spectra(small_torus):
    M, F = small_torus
    Lc, Ls = build_laplacians(M, F)
    return eigendecompose(Lc), eigendecompose(Ls)


@pytest.fixture(scope="session")
def small_torus_stencil(small_torus):
    M, F = small_torus
    return TangentStencil.build(M, F)


@pytest.fixture(scope="session")
def small_sphere():
    M = generate_manifold("sphere", 3)
    return M, estimate_frames(M)


@pytest.fixture(scope="session")
def small_sphere_spectra(small_sphere):
    M, F = small_sphere
    Lc, Ls = build_laplacians(M, F)
    return eigendecompose(Lc), eigendecompose(Ls)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
