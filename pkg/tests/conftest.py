import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sepccm.metric import load_metric_text
from sepccm.network import _data_text, builtin_example, load_network

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

SCALAR_STABLE = """
[node 0]
dims = 1 1
f[0] = -1*v0
B[0,0] = 1
"""

SCALAR_UNSTABLE = """
[node 0]
dims = 1 1
f[0] = v0
"""

SINGLE_EXAMPLE_NODE = """
[node 0]
dims = 3 1
f[0] = -1*v0 + v2
f[1] = v0^2 - v1^3 - 2*v0*v2 + v2
f[2] = -1*v1
B[2,0] = 1
"""


@pytest.fixture(scope="session")
def example():
    return builtin_example()


@pytest.fixture(scope="session")
def example_net(example):
    return example[0]


@pytest.fixture(scope="session")
def paper_metric(example):
    return example[1], example[2]


@pytest.fixture(scope="session")
def synth_metric():
    return load_metric_text(_data_text("three_node_synth.metric"))


@pytest.fixture
def scalar_stable():
    return load_network(SCALAR_STABLE)


@pytest.fixture
def scalar_unstable():
    return load_network(SCALAR_UNSTABLE)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
