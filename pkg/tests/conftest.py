import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

warnings.filterwarnings("ignore", message=".*TBB.*")

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def model():
    from lcmcodec.networks import CodecModel

    return CodecModel.initialized(seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
