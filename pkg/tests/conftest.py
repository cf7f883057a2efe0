import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fwdsmooth.models import FiniteHMM, LinearGaussianModel

settings.register_profile(
    "default",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture
def lgssm():
    return LinearGaussianModel(0.8, 1.0, 1.0, 1.0)


@pytest.fixture
def lgssm_star():
    return LinearGaussianModel(0.8, 0.1, 1.0, 1.0)


@pytest.fixture
def hmm3():
    return FiniteHMM(
        np.array([0.5, 0.3, 0.2]),
        np.array([[0.8, 0.15, 0.05], [0.1, 0.8, 0.1], [0.05, 0.15, 0.8]]),
        np.array([[0.7, 0.2, 0.1], [0.15, 0.7, 0.15], [0.1, 0.2, 0.7]]),
    )
