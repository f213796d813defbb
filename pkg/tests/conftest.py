import numpy as np
import pytest

from stablernn import plant


@pytest.fixture(scope="session")
def tiny_dataset():
    """Plant data small enough for unit tests: 6/2/1 sequences of 150 steps."""
    return plant.benchmark_dataset(n_train=6, n_val=2, n_test=1, T_s=150, T_w=20, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
