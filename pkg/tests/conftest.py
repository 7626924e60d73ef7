import numpy as np
import pytest

from robustjd.model import JumpDiffusionModel, TimeGrid, simulate_paths


@pytest.fixture(scope="session")
def grid20():
    return TimeGrid.regular(1.0, 20)


@pytest.fixture(scope="session")
def model_jump():
    # one mark at x = 1 with weight 2, unit compensator density
    return JumpDiffusionModel.constant_xi(1, [[1.0]], [2.0])


@pytest.fixture(scope="session")
def model_nojump():
    return JumpDiffusionModel.constant_xi(1, np.zeros((0, 1)), [])


@pytest.fixture(scope="session")
def paths_jump(model_jump, grid20):
    return simulate_paths(model_jump, grid20, 20_000, 421)


@pytest.fixture(scope="session")
def paths_nojump(model_nojump, grid20):
    return simulate_paths(model_nojump, grid20, 20_000, 422)
