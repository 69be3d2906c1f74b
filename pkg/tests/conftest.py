import numpy as np
import pytest

from src.constants import Preset
from src.presets import build_preset
from src.sde_core import PathGrid, SdeModel, make_path_grid
from src.semigroup import GridBackend, SpatialGrid


@pytest.fixture
def ou_model() -> SdeModel:
    return build_preset(Preset.LINEAR_GAUSSIAN, {"a": 1.0, "sigma": 1.0, "gain": 1.0})


@pytest.fixture
def bm_model() -> SdeModel:
    return build_preset(Preset.BM_1D)


@pytest.fixture
def small_grid() -> SpatialGrid:
    return SpatialGrid(half_width=6.0, points=121)


@pytest.fixture
def ou_backend(ou_model: SdeModel, small_grid: SpatialGrid) -> GridBackend:
    return GridBackend(ou_model, small_grid)


@pytest.fixture
def short_path() -> PathGrid:
    return make_path_grid(T=0.4, M=64, d1=1, d2=1, seed=3)


@pytest.fixture
def two_channel_path() -> PathGrid:
    return make_path_grid(T=1.0, M=64, d1=1, d2=2, seed=11)


@pytest.fixture
def bump_values(small_grid: SpatialGrid) -> np.ndarray:
    return np.exp(-0.5 * small_grid.axis**2)
