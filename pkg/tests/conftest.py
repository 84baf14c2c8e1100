import numpy as np
import pytest
from hypothesis import settings

from soaforge.particles import make_particles
from soaforge.schema import builtin_access_sets, builtin_schema

settings.register_profile("default", max_examples=200, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def schema():
    return builtin_schema()


@pytest.fixture(scope="session")
def access():
    return {a.kernel: a for a in builtin_access_sets()}


@pytest.fixture
def state():
    return make_particles(256, seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[n])
