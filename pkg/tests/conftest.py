import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from thermoda.models import EmParams
from thermoda.nature import em_truth, observe

settings.register_profile(
    "thermoda", deadline=None, max_examples=50,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("thermoda")


@pytest.fixture(scope="session")
def em_params():
    return EmParams()


@pytest.fixture(scope="session")
def em_series(em_params):
    """A 6 h EM trajectory sampled every 10 s, with its states."""
    truth, states = em_truth(em_params, 6 * 3600.0, report_interval=10.0)
    return truth, states


@pytest.fixture(scope="session")
def em_obs(em_series):
    truth, _ = em_series
    return observe(truth, 6e-4, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# one verdict per acceptance criterion, printed at the end of the session
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
