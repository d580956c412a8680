import numpy as np
import pytest

from bubbling.grid import Grid2D
from bubbling.problem import CurvatureProblem, build_f


@pytest.fixture
def single_well():
    return build_f([(0.5, 0.5)], 1.5)


@pytest.fixture
def coarse_problem(single_well):
    return CurvatureProblem(Grid2D(1.0, 64), single_well, 1.0, 0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
