import numpy as np
import pytest

from stsl.schedule import build_schedule
from stsl.scoremodels import GaussianMixturePrior, GaussianPrior, MixtureScore


def random_spd(rng, d, floor=0.1):
    L = rng.standard_normal((d, d)) / np.sqrt(d)
    return L @ L.T + floor * np.eye(d)


def random_gaussian(rng, d):
    return GaussianPrior(rng.standard_normal(d), random_spd(rng, d))


def random_gmm(rng, d, C=3, diag=True):
    w = rng.dirichlet(np.ones(C))
    means = 1.5 * rng.standard_normal((C, d))
    covs = [rng.uniform(0.2, 1.0, d) if diag else random_spd(rng, d, 0.2) for _ in range(C)]
    return GaussianMixturePrior(w, means, covs)


@pytest.fixture(scope="session")
def schedule():
    return build_schedule(50)


@pytest.fixture
def rng():
    return np.random.default_rng(20261019)


@pytest.fixture
def gmm2(schedule):
    prior = GaussianMixturePrior(
        [0.4, 0.6], [[-1.5, 0.0], [1.5, 0.5]], [np.array([0.3, 0.2]), np.array([0.2, 0.4])]
    )
    return MixtureScore(prior, schedule)


_VERDICTS = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion."""

    def record(criterion, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'}  criterion {criterion}: {detail}"
        print(line)
        _VERDICTS.append(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
