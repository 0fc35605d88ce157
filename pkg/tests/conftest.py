import sys

import numpy as np
import pytest

from sgdlimit.gradient_flow import FlowConfig, phi_limit
from sgdlimit.loss_models import MotorProblem, OlmProblem, olm_generate

TIGHT = FlowConfig(atol=1e-13, rtol=1e-12, grad_stop=1e-12)


def olm_point(p, seed=0, cfg=TIGHT):
    """A point of the OLM manifold reached by gradient flow from a random start."""
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(0.5, 1.5, p.dim) * rng.choice([-1.0, 1.0], p.dim)
    return phi_limit(p, x0, cfg)


@pytest.fixture(scope="session")
def olm_small():
    return olm_generate(2, 3, 1, seed=1)


@pytest.fixture(scope="session")
def olm_small_points(olm_small):
    return [olm_point(olm_small, s) for s in range(5)]


@pytest.fixture(scope="session")
def olm_tiny():
    # d=1, n=1, z=1, y=3
    return OlmProblem(np.array([[1.0]]), np.array([3.0]), np.array([3.0]), 1)


@pytest.fixture(scope="session")
def motor5():
    return MotorProblem(5)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(acceptance.RESULTS):
        terminalreporter.write_line(acceptance.RESULTS[k])
