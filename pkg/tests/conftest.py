import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "cots", deadline=None, suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large], print_blob=True
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "cots"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# Acceptance criteria register one verdict line each; the lines are printed in
# the terminal summary so they appear even when output capture is on.
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
