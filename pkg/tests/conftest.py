import numpy as np
import pytest

from aqr.backfit import Dataset
from aqr.simulation import SUPPORT, SimModel, gen_covariates, gen_response


def model_data(n, seed, d=3, correlated=False):
    """Sample from the simulation model, keeping the first ``d`` covariates."""
    rng = np.random.default_rng(seed)
    x = gen_covariates(n, correlated, rng)
    y, u = gen_response(x, rng, SimModel(correlated))
    return Dataset(y, x[:, :d], SUPPORT[:d]), u


@pytest.fixture
def small_data():
    data, _ = model_data(80, 5, d=2)
    return data
