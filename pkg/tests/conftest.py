import numpy as np
import pytest

from lqglab import Grid, derive_params, make_rng
from lqglab import fields


@pytest.fixture
def rng():
    return make_rng(1234, "tests")


@pytest.fixture
def half_grid():
    return Grid.half_plane(64, 32, 1 / 16)


@pytest.fixture
def fb_field(half_grid):
    return fields.sample_free_boundary_half_plane(half_grid, make_rng(5, "fb-fixture"))


@pytest.fixture
def params_83():
    return derive_params(np.sqrt(8 / 3), 4.0)
