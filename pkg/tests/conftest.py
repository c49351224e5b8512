import numpy as np
import pytest

from nsmalliavin import IntegratorSpec, NoiseModel, make_profile

PAPER_Z0 = [(1, 0), (-1, 0), (1, 1), (-1, -1)]
DEGENERATE_Z0 = [(1, 0), (-1, 0)]


def paper_model(kind="spectral_coordinate", modes=PAPER_Z0):
    if kind == "constant":
        return NoiseModel(modes, "constant", make_profile("constant", [0.5]), aleph=0.5)
    if kind == "norm_based":
        return NoiseModel(modes, "norm_based", make_profile("bump", [0.3, 0.2]), aleph=0.5)
    return NoiseModel(modes, "spectral_coordinate", make_profile("sigmoid", [0.25, 0.25]), aleph=0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def model():
    return paper_model()


@pytest.fixture
def small_spec():
    return IntegratorSpec(dt=1e-2, grid=16, nu=0.1)


@pytest.fixture
def tiny_spec():
    # K = 2, D = 24
    return IntegratorSpec(dt=1e-2, grid=8, nu=0.1)
