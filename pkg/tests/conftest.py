import sys

import numpy as np
import pytest

from spdcforge import kinematics as kin
from spdcforge import simulator as sim


@pytest.fixture(scope="session")
def geom():
    return kin.ExperimentGeometry()


@pytest.fixture(scope="session")
def quiet_run():
    """Default detector, no background, half an hour at the reference rate."""
    cfg = sim.SimulationConfig(seed=11, background_ratio=0.0, duration=0.5)
    return sim.simulate(cfg)


@pytest.fixture(scope="session")
def busy_run():
    cfg = sim.SimulationConfig(seed=12, background_ratio=10.0, duration=0.25)
    return sim.simulate(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = next((m for name, m in sys.modules.items() if name.rsplit(".", 1)[-1] == "test_acceptance"), None)
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
