import numpy as np
import pytest

from src.constants import Preset, Target
from src.errors import (
    BoundaryContaminationError,
    ConfigError,
    DegenerateFitError,
    InvalidIndexError,
    UnsupportedError,
    VacuousFitError,
)
from src.gradient_harness import (
    dyadic_times,
    gradient_exponent_fit,
    normalised_quotient_check,
    slope_ordering_check,
)
from src.presets import build_preset, gaussian_bump, named_function
from src.sde_core import observe_path
from src.semigroup import GridBackend, MonteCarloBackend, SpatialGrid
from src.ufg_algebra import EMPTY, MultiIndex, ScalarField

ONE = MultiIndex((1,))


@pytest.fixture(scope="module")
def fine_bm_backend():
    return GridBackend(build_preset(Preset.BM_1D), SpatialGrid(2.0, 801), dense_limit=801)


@pytest.fixture
def coarse_bm_backend():
    return GridBackend(build_preset(Preset.BM_1D), SpatialGrid(2.0, 201))


def test_dyadic_times():
    times = dyadic_times()
    assert len(times) == 7
    assert times[0] == 0.1
    assert times[-1] == pytest.approx(0.1 / 64)


def test_undifferentiated_heat_does_not_blow_up(ou_backend):
    report = gradient_exponent_fit(ou_backend, Target.HEAT, EMPTY, EMPTY, gaussian_bump())
    assert report.theoretical_slope == 0.0
    assert report.passed
    assert report.times == sorted(report.times, reverse=True)


@pytest.mark.slow
def test_heat_gradient_of_a_step_scales_like_inverse_root_time(fine_bm_backend):
    step = named_function("step", width=0.005)
    report = gradient_exponent_fit(fine_bm_backend, Target.HEAT, ONE, EMPTY, step)
    assert report.slope == pytest.approx(-0.5, abs=0.05)
    assert report.passed
    assert report.to_dict()["alpha"] == [1]


@pytest.mark.slow
def test_heat_second_derivative_scales_like_inverse_time(fine_bm_backend):
    step = named_function("step", width=0.005)
    report = gradient_exponent_fit(fine_bm_backend, Target.HEAT, ONE, ONE, step)
    assert report.theoretical_slope == -1.0
    assert report.slope == pytest.approx(-1.0, abs=0.1)
    assert report.passed


@pytest.mark.slow
def test_rho_gradient_exponent_is_stable_across_paths():
    model = build_preset(Preset.OU_TANH)
    backend = GridBackend(model, SpatialGrid(2.0, 401))
    step = named_function("step", width=0.02)
    slopes = []
    for seed in range(10):
        path = observe_path(model, [0.0], 0.1, 64, seed=40 + seed)
        report = gradient_exponent_fit(backend, Target.RHO, ONE, EMPTY, step, path=path)
        slopes.append(report.slope)
    assert min(slopes) >= -0.6
    assert max(slopes) - min(slopes) <= 0.3


@pytest.mark.slow
def test_slopes_decrease_with_derivative_order(fine_bm_backend):
    step = named_function("step", width=0.005)
    report = slope_ordering_check(fine_bm_backend, Target.HEAT, step)
    assert report.passed
    slopes = report.details["slopes"]
    assert slopes[0] > slopes[1] > slopes[2]
    assert report.details["pairs"][2] == ["(1)", "(1)"]


def test_boundary_contamination_is_reported(coarse_bm_backend):
    x = coarse_bm_backend.grid.axis
    edge = np.tanh((x - 1.9) / 0.02)
    with pytest.raises(BoundaryContaminationError):
        gradient_exponent_fit(coarse_bm_backend, Target.HEAT, ONE, EMPTY, edge)


def test_vacuous_fit_is_reported(coarse_bm_backend):
    one = ScalarField.constant(1, 1.0)
    with pytest.raises(VacuousFitError):
        gradient_exponent_fit(coarse_bm_backend, Target.HEAT, EMPTY, ONE, one)


def test_fit_needs_enough_positive_times(ou_backend):
    bump = gaussian_bump()
    with pytest.raises(DegenerateFitError):
        gradient_exponent_fit(ou_backend, Target.HEAT, EMPTY, EMPTY, bump, times=[0.1, 0.05])
    with pytest.raises(InvalidIndexError):
        gradient_exponent_fit(
            ou_backend, Target.HEAT, EMPTY, EMPTY, bump, times=[0.1, 0.05, 0.02, 0.01, 0.0]
        )


def test_fit_needs_the_grid_backend(ou_model):
    backend = MonteCarloBackend(ou_model, [[0.0]], n_paths=10)
    with pytest.raises(UnsupportedError):
        gradient_exponent_fit(backend, Target.HEAT, EMPTY, EMPTY, gaussian_bump())


def test_filter_targets_need_a_path(ou_backend):
    with pytest.raises(ConfigError) as info:
        gradient_exponent_fit(ou_backend, Target.PI, ONE, EMPTY, gaussian_bump())
    assert info.value.key_path == "path"


def test_quotient_rule_on_the_grid(ou_model):
    backend = GridBackend(ou_model, SpatialGrid(6.0, 241))
    path = observe_path(ou_model, [0.0], 0.2, 40, seed=13)
    residual = normalised_quotient_check(backend, ONE, EMPTY, gaussian_bump(), 0.2, path)
    assert residual < 1e-2


def test_quotient_residual_shrinks_with_the_grid_spacing():
    model = build_preset(Preset.OU_TANH)
    path = observe_path(model, [0.0], 0.2, 40, seed=13)
    residuals = [
        normalised_quotient_check(
            GridBackend(model, SpatialGrid(6.0, points)), ONE, EMPTY, gaussian_bump(), 0.2, path
        )
        for points in (121, 241, 481)
    ]
    # central differences: halving dx cuts the product-rule defect by about four
    assert residuals[1] < 0.5 * residuals[0]
    assert residuals[2] < 0.5 * residuals[1]


def test_quotient_rule_without_a_sensor(small_grid):
    model = build_preset(Preset.LINEAR_GAUSSIAN, {"gain": 0.0})
    path = observe_path(model, [0.0], 0.2, 20, seed=5)
    residual = normalised_quotient_check(
        GridBackend(model, small_grid), ONE, EMPTY, gaussian_bump(), 0.2, path
    )
    assert residual < 1e-10
