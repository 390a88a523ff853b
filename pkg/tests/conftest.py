import numpy as np
import pytest

from ordgene.hypspace import enumerate_hypotheses
from ordgene.model import ExpressionDataset, GlobalParams
from ordgene.simulate import generate_dataset


def philox(seed):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


@pytest.fixture(scope="session")
def params_s2():
    hyps = enumerate_hypotheses(2)
    return GlobalParams(
        state_shapes=np.array([3.0, 4.5]),
        prior_shape=3.0,
        prior_mean_scale=2.0,
        mixture_weights=np.array([0.5, 0.25, 0.25]),
    )


@pytest.fixture(scope="session")
def dataset_s2(params_s2):
    dataset, _ = generate_dataset(params_s2, 6, 4, philox(11))
    return dataset


@pytest.fixture(scope="session")
def params_s3():
    hyps = enumerate_hypotheses(3)
    w = np.full(len(hyps), 0.5 / (len(hyps) - 1))
    w[0] = 0.5
    return GlobalParams(
        state_shapes=np.array([2.0, 5.0, 3.5]),
        prior_shape=4.0,
        prior_mean_scale=3.0,
        mixture_weights=w,
    )


@pytest.fixture(scope="session")
def dataset_s3(params_s3):
    dataset, _ = generate_dataset(params_s3, 5, 3, philox(12))
    return dataset


@pytest.fixture(scope="session")
def dataset_s4():
    hyps = enumerate_hypotheses(4)
    w = np.zeros(len(hyps))
    w[0] = 0.7
    w[5] = 0.2
    w[10] = 0.1
    params = GlobalParams(
        state_shapes=np.full(4, 20.0),
        prior_shape=5.0,
        prior_mean_scale=9.0,
        mixture_weights=w,
    )
    dataset, truth = generate_dataset(params, 12, 5, philox(13))
    return dataset, truth, params
