import numpy as np
import pytest

from innetsim import kernels


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    """Parametrize a test over every built kernel backend."""
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
