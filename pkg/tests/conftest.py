import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("herdlab", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("herdlab")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
