import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dimgmm.gmm import Gmm

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("thorough", max_examples=500, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def random_spd(rng, dim, cond=10.0):
    """Random SPD matrix with eigenvalues spread over ``[1, cond]``."""
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    vals = np.exp(rng.uniform(0.0, np.log(cond), dim))
    return (q * vals) @ q.T


def random_gmm(rng, J, dim, scale=1.0):
    weights = rng.dirichlet(np.ones(J))
    means = scale * rng.standard_normal((J, dim))
    covs = np.stack([0.3 * random_spd(rng, dim) for _ in range(J)])
    return Gmm(weights, means, covs, weights * 50)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
