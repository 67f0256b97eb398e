import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "ci", deadline=None, derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("ci")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_random_graph(seed, n=None, edge_prob=0.4, weighted=True):
    from gspnn.graphs import random_graph
    r = np.random.default_rng(seed)
    if n is None:
        n = int(r.integers(3, 17))
    return random_graph(n, edge_prob, r, weighted=weighted), r
