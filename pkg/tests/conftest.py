import numpy as np
import pytest
from hypothesis import settings

from agemodel.fields import GridSpec
from agemodel.model import build_model
from agemodel.registration import RegistrationParams
from agemodel.validation import SimulationSpec, simulate_longitudinal

# fixed example generation keeps test runs reproducible
settings.register_profile("repo", derandomize=True, deadline=None)
settings.load_profile("repo")


@pytest.fixture
def grid2d():
    return GridSpec((48, 48, 1), (1.0, 1.0, 1.0))


@pytest.fixture
def fast_params():
    return RegistrationParams(levels=2, iterations_per_level=(30, 20), affine_iterations=30)


@pytest.fixture(scope="session")
def small_sim():
    spec = SimulationSpec(cohort_size=4, template_iterations=1, seed=3)
    params = RegistrationParams(levels=2, iterations_per_level=(30, 20), affine_iterations=30)
    series, truth = simulate_longitudinal(spec, GridSpec((40, 40, 1)), params)
    return series, truth, params


@pytest.fixture(scope="session")
def small_model(small_sim):
    series, _, params = small_sim
    return build_model(series, params, gw_iters=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria")


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
