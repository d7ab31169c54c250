import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bigran.core import SyntheticSpec, gen_synthetic
from bigran.pq import train_opq, train_pq

settings.register_profile("default", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_data():
    spec = SyntheticSpec(dim=16, n_answers=1000, n_queries=300, n_clusters=8)
    return gen_synthetic(spec, seed=3)


@pytest.fixture(scope="session")
def small_books(small_data):
    return train_pq(small_data.answers.vectors, M=4, P=16, iters=10, seed=0)


@pytest.fixture(scope="session")
def small_opq(small_data):
    return train_opq(small_data.answers.vectors, M=4, P=16, alternations=3, seed=0, iters=10)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
