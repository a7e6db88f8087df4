import os

import pytest
from hypothesis import HealthCheck, settings

from btwalk.law import load_reference

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def law_a():
    return load_reference("A")


@pytest.fixture(scope="session")
def law_b():
    return load_reference("B")


@pytest.fixture(scope="session")
def law_c():
    return load_reference("C")
