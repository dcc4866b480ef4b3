import functools

import numpy as np
import pytest
import torch

from mosearch.worldgen import GenConfig, SemanticGrid, make_episode

torch.set_num_threads(1)


@functools.lru_cache(maxsize=None)
def episode(seed, k=1, rooms=6):
    return make_episode(seed, k, GenConfig(n_rooms=rooms))


@pytest.fixture(scope="session")
def small_episode():
    return episode(3, 2, 4)


def box_grid(h, w, res=0.033, wall=1):
    """Closed rectangular room with walls ``wall`` cells thick."""
    g = SemanticGrid.empty(h, w, res)
    g.occupancy[:] = 0
    g.occupancy[:wall, :] = 1
    g.occupancy[-wall:, :] = 1
    g.occupancy[:, :wall] = 1
    g.occupancy[:, -wall:] = 1
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
