import socket
import sys
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=200, deadline=None)
settings.register_profile("ci", max_examples=1000, deadline=None)
settings.load_profile("default")


def free_udp_port():
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture
def udp_port():
    return free_udp_port()


@pytest.fixture
def calibration_scenario():
    """Bright step at 0 s, dim at 5 s: constricted 2.3 mm, baseline 3.5 mm."""
    from gazeload.simulator import ScenarioConfig
    return ScenarioConfig(seed=1, duration=10.0, light_steps=((0.0, "bright"), (5.0, "dim")))
