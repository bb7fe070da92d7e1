import numpy as np
import pytest

from biteauth.config import Config


@pytest.fixture(scope="session")
def cfg():
    return Config()


@pytest.fixture(scope="session")
def fast_cfg():
    """Reduced training budget for tests that only need a working network,
    not a well-separated embedding space."""
    return Config(net_epochs=2, net_triplet_cap=48, augment_copies=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
