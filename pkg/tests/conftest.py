import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")
torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rand_image(rng, h, w, c=3):
    return rng.random((h, w, c)).astype(np.float32)


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(config.acceptance_lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
