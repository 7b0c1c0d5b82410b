import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from earlycrop.data import make_synthetic
from earlycrop.models import cnn, mlp

settings.register_profile("default", max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=200, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def moons():
    return make_synthetic("two_moons", 400, 0.1, seed=3)


@pytest.fixture
def moons_batch(moons):
    return moons.x_train[:64], moons.y_train[:64]


@pytest.fixture
def tanh_mlp():
    return mlp([2, 8, 6, 2], "tanh", seed=11)


@pytest.fixture
def small_cnn():
    return cnn((6, 6, 2), channels=(3, 4), n_out=3, hidden=(5,), activation="tanh", seed=4)


@pytest.fixture
def image_batch():
    rng = np.random.default_rng(9)
    return rng.standard_normal((5, 6, 6, 2)), np.array([0, 1, 2, 1, 0])
