import numpy as np
import pytest

from safe_exploration import envs


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def pendulum():
    return envs.make_pendulum()


@pytest.fixture(scope="session")
def manipulator():
    return envs.make_manipulator()
