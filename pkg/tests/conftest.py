import numpy as np
import pytest
from hypothesis import settings

from mtdc.controllers import ControllerSpec
from mtdc.grid import CommGraph, four_bus_ring

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

PRE_STEP = np.array([300.0, 200.0, -100.0, -400.0])
POST_STEP = np.array([300.0, 200.0, -300.0, -400.0])


@pytest.fixture
def ring():
    return four_bus_ring()


@pytest.fixture
def reference_specs(ring):
    """Reference gains for the four-bus network, communication mirroring the lines."""
    cg = CommGraph.mirror(ring)
    return {
        "vdm": ControllerSpec.vdm(np.full(4, 10.0)),
        "avg1": ControllerSpec.avg1(10.0, 10.0, 20.0, cg),
        "avg2": ControllerSpec.avg2(10.0, 5.0, 15.0, cg),
        "avg3": ControllerSpec.avg3(0.5, 2.5, 3.0, 2.0, cg),
    }


def pytest_terminal_summary(terminalreporter):
    from tests import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
