import math
import os
import sys
import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from facetflow.anisotropy import square_J  # noqa: E402
from facetflow.harness_cli import preset  # noqa: E402

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def J():
    return square_J()


@pytest.fixture
def parabola():
    return preset("parabola")


@pytest.fixture
def minimal():
    return preset("minimal")


@pytest.fixture
def two_hump():
    return preset("two-hump")


@pytest.fixture
def quiet():
    """Silence the solver's under-resolution warning for deliberately coarse grids."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        yield


def grid(n):
    return np.arange(n) * (2 * math.pi / n)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for k in sorted(results):
            terminalreporter.write_line(results[k])
