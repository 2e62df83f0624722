import math
import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mcuapa.model import InstanceConfig
from mcuapa.scenario import ChannelParams, FadingModel, build_scenario, generate_placement

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _quiet_start_warnings():
    # the start-point QoS warning is part of the contract but noisy in bulk
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="initial point misses")
        yield


def make_scn(m, n, seed=0, fading="exponential_unit_mean", radius=math.inf, mbs=None,
             params=None):
    pl = generate_placement(m, n, coverage_radius_m=radius, seed=seed, mbs_xy=mbs)
    return build_scenario(params or ChannelParams(), pl, FadingModel(fading, seed))


def fixed_scn(mbs, users, fading="deterministic_unit", radius=math.inf, params=None):
    pl = generate_placement(len(mbs), len(users), coverage_radius_m=radius,
                            mode="fixed_list", mbs_xy=mbs, user_xy=users)
    return build_scenario(params or ChannelParams(), pl, FadingModel(fading))


@pytest.fixture
def scn_10x5():
    return make_scn(5, 10, seed=42)


@pytest.fixture
def cfg_10():
    return InstanceConfig.equal(10)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    def record(num, name, ok, detail):
        line = f"criterion {num:>2} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
        ACCEPTANCE_LINES.append((num, line))
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
