import math

import numpy as np
import pytest

from src.chaos_expansion import (
    adjoint_truncated_expansion,
    chaos_chen_check,
    expansion_duality_gaps,
    level_functions,
    norm_dictionary,
    operator_norm_decay,
    r_operator_grid,
    remainder_bound,
    simplex_volume_constant,
    truncated_expansion,
)
from src.constants import AdjointForm, Preset
from src.errors import InvalidIndexError, UnsupportedError
from src.iterated_integrals import words
from src.filtering import rho_mc, z_score
from src.presets import build_preset, cosine_wave, polynomial_model
from src.sde_core import make_path_grid, observe_path
from src.semigroup import GridBackend, MonteCarloBackend, SpatialGrid


@pytest.fixture
def two_sensor_backend(small_grid):
    model = polynomial_model(
        [0.0, -1.0],
        [[1.0]],
        [{"kind": "tanh", "scale": 1.0}, {"kind": "polynomial", "coefficients": [0.5, 0.2]}],
    )
    return GridBackend(model, small_grid)


def test_level_zero_is_the_semigroup(ou_backend, short_path, bump_values):
    functions = level_functions(ou_backend, short_path, 0.0, short_path.T, bump_values, 2)
    assert len(functions) == 3
    np.testing.assert_allclose(
        functions[0], ou_backend.propagate(short_path.T, bump_values), atol=1e-10
    )


def test_levels_sum_the_word_operators(two_sensor_backend, two_channel_path, small_grid):
    bump = np.exp(-0.5 * small_grid.axis**2)
    functions = level_functions(two_sensor_backend, two_channel_path, 0.0, 1.0, bump, 2)
    for m in (1, 2):
        total = sum(
            r_operator_grid(two_sensor_backend, two_channel_path, w, 0.0, 1.0, bump)
            for w in words(2, m)
        )
        np.testing.assert_allclose(total, functions[m], atol=1e-12)


def test_one_step_path(ou_backend, bump_values):
    path = make_path_grid(0.01, 1, 1, 1, seed=5)
    functions = level_functions(ou_backend, path, 0.0, 0.01, bump_values, 2)
    h = ou_backend.model.sensor_values(ou_backend.x)[:, 0]
    expected = path.dY[0, 0] * h * ou_backend.propagate(0.01, bump_values)
    np.testing.assert_allclose(functions[1], expected, atol=1e-12)
    assert np.all(functions[2] == 0.0)


def test_per_word_terms_add_up(two_sensor_backend, two_channel_path, small_grid):
    bump = np.exp(-0.5 * small_grid.axis**2)
    result = truncated_expansion(
        two_sensor_backend, two_channel_path, [0.0], bump, 2, per_word=True
    )
    assert len(result.terms) == 2 + 4
    for m in (1, 2):
        total = sum(term.contribution for term in result.terms if term.level == m)
        assert total == pytest.approx(result.levels[m], abs=1e-12)
    assert result.value == pytest.approx(sum(result.levels))
    assert result.to_dict()["terms"][0]["word"] == [1]


def test_expansion_is_dual_to_the_adjoint_series(ou_backend, short_path, bump_values):
    g = np.exp(-((ou_backend.grid.axis - 1.0) ** 2))
    gaps = expansion_duality_gaps(ou_backend, short_path, bump_values, g, 3)
    assert len(gaps) == 4
    assert max(gaps) < 1e-10


def test_formula_adjoint_series_tracks_the_transpose(ou_backend, short_path):
    g = np.exp(-0.5 * (ou_backend.grid.axis - 0.5) ** 2)
    transpose = adjoint_truncated_expansion(ou_backend, short_path, g, 1)
    formula = adjoint_truncated_expansion(ou_backend, short_path, g, 1, form=AdjointForm.FORMULA)
    scale = ou_backend.sup_norm(transpose.level_functions[0])
    gap = ou_backend.sup_norm(formula.level_functions[0] - transpose.level_functions[0])
    assert gap < 2e-2 * scale


def test_chen_relation_for_operator_levels(ou_model):
    backend = GridBackend(ou_model, SpatialGrid(6.0, 41))
    path = make_path_grid(0.2, 16, 1, 1, seed=2)
    assert chaos_chen_check(backend, path, 0.0, 0.1, 0.2, 2) < 1e-10


def test_remainder_bound():
    assert remainder_bound(0.0, 1.0, 2, 1.0) == 0.0
    assert remainder_bound(0.5, 2.0, 1, 3.0) == pytest.approx(math.e * 0.5**4 / 2 * 9.0)
    with pytest.raises(InvalidIndexError):
        remainder_bound(-1.0, 1.0, 1, 1.0)


def test_simplex_volume_constant():
    assert simplex_volume_constant(2, 1.0) == pytest.approx(8 * math.pi)
    assert simplex_volume_constant(1, 2.0) == pytest.approx(16.0)
    with pytest.raises(InvalidIndexError):
        simplex_volume_constant(0, 1.0)


def test_norm_dictionary(ou_backend):
    dictionary = norm_dictionary(ou_backend)
    assert dictionary.shape == (121, 32)
    with pytest.raises(UnsupportedError):
        norm_dictionary(ou_backend, version=2)
    flat = GridBackend(build_preset(Preset.BM_2D), SpatialGrid(2.0, 11, dim=2))
    with pytest.raises(UnsupportedError):
        norm_dictionary(flat)


def test_norm_decay_is_trivial_without_sensors(small_grid, short_path):
    model = build_preset(Preset.LINEAR_GAUSSIAN, {"gain": 0.0})
    report = operator_norm_decay(GridBackend(model, small_grid), short_path, 1, 0.45)
    assert report.trivial
    assert report.passed
    assert report.slope is None
    assert len(report.lengths) == 5


def test_word_and_backend_errors(ou_model, ou_backend, short_path, bump_values):
    with pytest.raises(InvalidIndexError):
        r_operator_grid(ou_backend, short_path, (), 0.0, 0.4, bump_values)
    with pytest.raises(InvalidIndexError):
        r_operator_grid(ou_backend, short_path, (2,), 0.0, 0.4, bump_values)
    with pytest.raises(InvalidIndexError):
        level_functions(ou_backend, short_path, 0.0, 0.4, bump_values, 9)
    with pytest.raises(InvalidIndexError):
        operator_norm_decay(ou_backend, short_path, 0, 0.45)
    mc = MonteCarloBackend(ou_model, [[0.0]], n_paths=10)
    with pytest.raises(UnsupportedError):
        level_functions(mc, short_path, 0.0, 0.4, bump_values, 1)


def test_norm_decay_takes_the_largest_dyadic_interval(ou_backend, short_path):
    report = operator_norm_decay(ou_backend, short_path, 1, 0.4)
    quiet = short_path.dY.copy()
    quiet[: short_path.M // 2] = 0.0
    Y = np.vstack([np.zeros((1, 1)), np.cumsum(quiet, axis=0)])
    second = operator_norm_decay(ou_backend, short_path.with_observation(Y), 1, 0.4)
    assert not report.trivial
    assert second.norms[-1] > 0.0
    # below the full length the windows of the quiet path are a subset of the original ones
    for whole, quieter in zip(report.norms[1:], second.norms[1:], strict=True):
        assert quieter <= whole * (1 + 1e-9)


@pytest.mark.slow
def test_norm_decay_slope_on_brownian_paths(ou_backend):
    slopes = []
    for seed in range(20):
        path = make_path_grid(1.0, 64, 1, 1, seed=100 + seed)
        first = operator_norm_decay(ou_backend, path, 1, 0.4)
        second = operator_norm_decay(ou_backend, path, 2, 0.4)
        slopes.append((first.slope, second.slope))
    assert sum(first >= 0.3 for first, _ in slopes) >= 18
    mean_first, mean_second = np.mean(slopes, axis=0)
    assert mean_second == pytest.approx(2 * mean_first, abs=0.2)


@pytest.mark.slow
def test_truncated_expansion_agrees_with_monte_carlo():
    model = build_preset(Preset.OU_TANH)
    backend = GridBackend(model, SpatialGrid(6.0, 241))
    path = observe_path(model, [0.3], 0.5, 100, seed=23)
    expansion = truncated_expansion(backend, path, [0.3], cosine_wave(), 4)
    mc = rho_mc(model, [0.3], path, cosine_wave(), n_paths=20_000, seed=8)
    assert abs(z_score(expansion.value, 0.0, mc.rho_phi, mc.rho_phi_stderr)) < 4.0
