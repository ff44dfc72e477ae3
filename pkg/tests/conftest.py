import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("metavi", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("metavi")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
