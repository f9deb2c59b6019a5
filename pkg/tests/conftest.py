import math
from pathlib import Path

import numpy as np
import pytest

from soilmap.fee import SoilProperties

FIXTURES = Path(__file__).parent / "fixtures"
REPO = Path(__file__).parent.parent


@pytest.fixture
def soil():
    return SoilProperties(c=5000.0, phi=math.radians(30.0), c_a=1000.0,
                          delta=math.radians(10.0), gamma=18000.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def strip_scenario_path():
    return REPO / "scenarios" / "strip.yaml"


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS):
            terminalreporter.write_line(line)
