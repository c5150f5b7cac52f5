import numpy as np
import pytest
import torch

from miae.geometry import random_rotation
from miae.synthetic import make_backbone, random_backbone

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def helix(rng):
    return make_backbone("helix", 16, rng)


def rigid(rng):
    """Random proper rotation and translation."""
    return random_rotation(rng), rng.normal(scale=20.0, size=3)


def rand_backbone(n, seed=0):
    return random_backbone(n, np.random.default_rng(seed))


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
