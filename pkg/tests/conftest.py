import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from twofilter.presets import example_system

settings.register_profile("default", deadline=None, max_examples=25, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def example_coarse():
    """Example model on [0, 5] with h = 0.05."""
    return example_system(5.0, 0.05)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_spd(rng, n, lo=0.1, hi=10.0):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return (Q * rng.uniform(lo, hi, n)) @ Q.T


def random_stable(rng, n, margin=0.3):
    A = rng.standard_normal((n, n))
    shift = np.linalg.eigvals(A).real.max() + margin
    return A - max(shift, 0.0) * np.eye(n) - margin * np.eye(n)


ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


@pytest.fixture
def acceptance_log(request):
    """Collects one summary line per acceptance criterion."""
    return request.config.stash[ACCEPTANCE_KEY]


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
