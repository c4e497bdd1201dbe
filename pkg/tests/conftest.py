import numpy as np
import pytest

from fedzo.testing import LoopbackOracleServer, echo_zero, input_hash


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def echo_server():
    with LoopbackOracleServer(echo_zero) as srv:
        yield srv


@pytest.fixture
def hash_server():
    with LoopbackOracleServer(input_hash) as srv:
        yield srv
