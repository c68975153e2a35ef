import numpy as np
import pytest

from pointrwkv.numerics import Tensor, set_precision


@pytest.fixture(autouse=True)
def _float64():
    set_precision(64)
    yield
    set_precision(64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)
