import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from edgenat.gradcheck import check_gradients
from edgenat.tensor import Tensor, precision

settings.register_profile(
    "default", deadline=None, max_examples=25, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


def fd_error(fn, inputs, seed=0, probes=10_000):
    """Max relative error between taped and central-difference gradients (float64)."""
    with precision(np.float64):
        err, _, _ = check_gradients(fn, inputs, np.random.default_rng(seed), probes=probes)
    return err


def t64(arr):
    return Tensor(np.asarray(arr, np.float64), dtype=np.float64)
