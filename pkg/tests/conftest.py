import numpy as np
import pytest

from pneunet import tensor as T


@pytest.fixture(autouse=True)
def finite_checks():
    # Every op output is screened for NaN/Inf while tests run.
    T.CHECK_FINITE = True
    yield
    T.CHECK_FINITE = False


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
