import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from armkit.model import ModelConfig, init_weights

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def tiny_cfg():
    return ModelConfig(n_layers=2, d_model=16, d_ff=32, n_heads=2, vocab_size=40, max_seq=96)


@pytest.fixture(scope="session")
def tiny_weights(tiny_cfg):
    return init_weights(tiny_cfg, 1234)


@pytest.fixture
def np_rng():
    return np.random.default_rng(20240601)


def pytest_terminal_summary(terminalreporter):
    mod = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
