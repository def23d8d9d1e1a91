import os

import pytest
from hypothesis import settings

from stackgame import GameSpec, Interval

settings.register_profile("ci", max_examples=60, deadline=None)
settings.load_profile("ci")

CONFIGS = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")

# shared scalar coefficients of the configs/ fixtures
BASE = dict(x0=1.0, A=0.2, B1=1.0, B2=0.5, C=0.3, D1=0.2, D2=0.1, Q1=1.0, Q2=0.5, Phi1=1.0, Phi2=0.5)


def scalar_spec(T=0.3, **over):
    kw = dict(BASE)
    kw.update(over)
    return GameSpec.scalar(T=T, **kw)


def config_path(name):
    return os.path.join(CONFIGS, name + ".json")


@pytest.fixture
def spec():
    return scalar_spec()


@pytest.fixture
def constrained_spec():
    return scalar_spec(gamma1=Interval(-0.85, 0.5), gamma2=Interval(-0.21, 0.3))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
