import pytest
from hypothesis import HealthCheck, settings

from patassign.config import builtin_config

settings.register_profile("default", max_examples=200, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.differing_executors])
settings.load_profile("default")


@pytest.fixture(scope="session")
def ex1():
    return builtin_config("example1").params


@pytest.fixture(scope="session")
def ex1_config():
    return builtin_config("example1")


@pytest.fixture(scope="session")
def ex2():
    return builtin_config("example2").params


@pytest.fixture(scope="session")
def ex2_config():
    return builtin_config("example2")
