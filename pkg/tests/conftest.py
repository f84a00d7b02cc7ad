import numpy as np
import pytest

from nestediv import ObservationTable, fit_nuisances, make_folds
from nestediv.nuisance import Family, LearnerSpec
from nestediv.sim import EstimationScenario, TestingScenario, gen_estimation_data, gen_testing_data


def eight_rows():
    """Two rows per code.  Y means 1, 2, 1, 4 and D means 0, 0.5, 0, 1 over (0a, 1a, 0b, 1b)."""
    z = [0, 0, 1, 1, 2, 2, 3, 3]
    y = [1, 1, 2, 2, 1, 1, 4, 4]
    d = [0, 0, 0, 1, 0, 0, 1, 1]
    x = np.arange(8.0)
    return ObservationTable(z=z, x=x, d=d, y=y)


def gaussian_learners(ridge=1e-6):
    return dict(
        spec_pi=LearnerSpec(Family.BINOMIAL_LOGIT, ridge=ridge),
        spec_mu_y=LearnerSpec(Family.LINEAR_GAUSSIAN, ridge=ridge),
        spec_mu_d=LearnerSpec(Family.BINOMIAL_LOGIT, ridge=ridge),
    )


def crossfit(table, K=5, seed=0, **kw):
    folds = make_folds(table.n, K, table.z, seed)
    return fit_nuisances(table, folds, **{**gaussian_learners(), **kw})


@pytest.fixture
def tiny():
    return eight_rows()


@pytest.fixture(scope="session")
def est_table():
    table, _ = gen_estimation_data(EstimationScenario(n=2000, seed=11))
    return table


@pytest.fixture(scope="session")
def est_fit(est_table):
    return est_table, crossfit(est_table, seed=3)


@pytest.fixture(scope="session")
def test_table():
    table, _ = gen_testing_data(TestingScenario(n=2000, switcher_alpha=0.6, beta_params=(2, 3, 3), seed=5))
    return table


@pytest.fixture(scope="session")
def test_fit(test_table):
    return test_table, crossfit(test_table, seed=4)
