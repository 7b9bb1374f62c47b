import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ttt_gate.backbone import BackboneConfig, init_backbone
from ttt_gate.ttt_layer import TTTConfig, TTTLayer, init_params

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def backbone():
    return init_backbone(BackboneConfig())


@pytest.fixture(scope="session")
def layer():
    cfg = TTTConfig()
    return TTTLayer(cfg, init_params(cfg, seed=0))
