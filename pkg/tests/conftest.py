from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sapool import tensor as T

DATA = Path(__file__).parent / "data"

settings.register_profile("default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def f64():
    with T.precision("f64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(data, grad=True):
    return T.Tensor(np.asarray(data, dtype=np.float64), requires_grad=grad, dtype=np.float64)
