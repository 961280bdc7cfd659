import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from riemstein.manifolds import Circle, Euclidean, Hyperbolic3, Sphere

settings.register_profile(
    "repo",
    max_examples=25,
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("repo")

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def sphere():
    return Sphere(2, 1.0)


@pytest.fixture
def hyperbolic():
    return Hyperbolic3(-1.0)


@pytest.fixture
def circle():
    return Circle(2 * np.pi)


@pytest.fixture
def plane():
    return Euclidean(2)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
