import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from nrdz.geometry import SourceSet, ZoneLayout, build_sensor_ring
from nrdz.propagation import ShadowingModel

settings.register_profile("nrdz", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("nrdz")


@pytest.fixture
def layout():
    return ZoneLayout(500.0, 50.0)


@pytest.fixture
def ring(layout):
    return build_sensor_ring(layout, np.pi / 8)


@pytest.fixture
def sources():
    pos = [[120.0, -80.0, 10.0], [-200.0, 150.0, 10.0], [30.0, 310.0, 10.0], [-260.0, -240.0, 10.0]]
    return SourceSet(["a", "b", "c", "d"], pos, [30.0] * 4, [3.5e9] * 4)


@pytest.fixture
def model():
    return ShadowingModel()


def random_sources(rng, m, r_core, altitude=10.0):
    rad = r_core * np.sqrt(rng.uniform(0, 1, m))
    az = rng.uniform(0, 2 * np.pi, m)
    pos = np.column_stack([rad * np.cos(az), rad * np.sin(az), np.full(m, altitude)])
    return SourceSet([f"s{i}" for i in range(m)], pos, np.full(m, 30.0), np.full(m, 3.5e9))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
