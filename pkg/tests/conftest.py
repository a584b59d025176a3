import numpy as np
import pytest

from apislab import synthgen


@pytest.fixture(scope="session")
def small_data():
    """Tiny split for fast unit tests."""
    return synthgen.generate_dataset(7, 12, 6)


@pytest.fixture(scope="session")
def default_data():
    """The default desk-scale dataset (200 train / 100 test, seed 0)."""
    return synthgen.generate_dataset(0, 200, 100)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
