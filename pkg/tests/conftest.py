import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from far import synth

settings.register_profile(
    "far", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("far")


@pytest.fixture(scope="session")
def synth_model():
    return synth.make_model(seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
