import numpy as np
import pytest


@pytest.fixture
def fd_rng():
    return np.random.default_rng(1234)
