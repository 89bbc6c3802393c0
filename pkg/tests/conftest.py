import os

import pytest
from hypothesis import HealthCheck, settings

from sdcsim import config_from_dict

settings.register_profile("default", deadline=None, max_examples=100,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=300,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def small_config():
    return config_from_dict({"fleet_size": 400, "horizon_days": 60, "defect_rate": 0.05})


@pytest.fixture(params=[True, False], ids=["numba", "numpy"])
def use_numba(request):
    return request.param


def pytest_terminal_summary(terminalreporter):
    from _helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
