import numpy as np
import pytest

from src.constants import AdjointForm, PropagationMethod
from src.errors import DimensionMismatchError, OffGridTimeError, UnsupportedError
from src.ufg_algebra import ScalarField
from src.presets import constant_field, cosine_wave, gaussian_bump, linear_field, polynomial_sensor
from src.semigroup import (
    GridBackend,
    MonteCarloBackend,
    SpatialGrid,
    adjoint_model,
    adjoint_semigroup,
    apply_first_order,
    constant_preservation_error,
    h1_norm,
    heat_semigroup,
    perturbed_semigroup,
    positivity_minimum,
    semigroup_property_residual,
)


def test_spatial_grid_geometry():
    grid = SpatialGrid(2.0, 5, dim=2)
    assert grid.dx == pytest.approx(1.0)
    assert grid.nodes.shape == (25, 2)
    assert grid.interior_mask(1).sum() == 9
    assert grid.index_of(1.0) == 3
    with pytest.raises(UnsupportedError):
        SpatialGrid(dim=3)
    with pytest.raises(DimensionMismatchError):
        SpatialGrid(1.0, 2)


def test_constants_and_positivity(ou_backend):
    assert constant_preservation_error(ou_backend, 0.5) < 1e-10
    assert positivity_minimum(ou_backend, 0.3, gaussian_bump(width=0.5)) > -1e-12


def test_semigroup_property(ou_backend, bump_values):
    assert semigroup_property_residual(ou_backend, 0.2, 0.3, bump_values) < 1e-10


def test_reflected_cosine_is_an_eigenfunction(bm_model):
    # cos has zero slope at +-pi, so the reflecting scheme keeps it exactly
    grid = SpatialGrid(np.pi, 101)
    backend = GridBackend(bm_model, grid)
    t = 0.7
    rate = (np.cos(grid.dx) - 1.0) / grid.dx**2
    expected = np.exp(rate * t) * np.cos(grid.axis)
    np.testing.assert_allclose(heat_semigroup(backend, t, cosine_wave()), expected, atol=1e-10)


@pytest.mark.parametrize(
    "method", [PropagationMethod.CRANK_NICOLSON, PropagationMethod.EXPM_MULTIPLY]
)
def test_propagation_methods_agree(ou_model, small_grid, bump_values, method):
    exact = GridBackend(ou_model, small_grid, PropagationMethod.EXPM).propagate(0.2, bump_values)
    other = GridBackend(ou_model, small_grid, method).propagate(0.2, bump_values)
    np.testing.assert_allclose(other, exact, atol=1e-5)


def test_constant_potential_scales(ou_backend, bump_values):
    plain = ou_backend.propagate(0.4, bump_values)
    scaled = perturbed_semigroup(ou_backend, 0.4, bump_values, 0.5)
    np.testing.assert_allclose(scaled, np.exp(0.2) * plain, rtol=1e-10, atol=1e-12)


def test_transpose_adjoint_is_exact(ou_backend, bump_values):
    g = np.exp(-((ou_backend.grid.axis - 1.0) ** 2))
    forward = ou_backend.inner(ou_backend.propagate(0.5, bump_values), g)
    backward = ou_backend.inner(
        bump_values, adjoint_semigroup(ou_backend, 0.5, g, form=AdjointForm.TRANSPOSE)
    )
    assert forward == pytest.approx(backward, rel=1e-12)


def test_formula_adjoint_matches_transpose(ou_backend):
    g = np.exp(-0.5 * (ou_backend.grid.axis - 0.5) ** 2)
    formula = adjoint_semigroup(ou_backend, 0.3, g, form=AdjointForm.FORMULA)
    transpose = adjoint_semigroup(ou_backend, 0.3, g, form=AdjointForm.TRANSPOSE)
    scale = ou_backend.sup_norm(transpose)
    assert ou_backend.sup_norm(formula - transpose) < 2e-2 * scale


def test_adjoint_model_of_ou(ou_model):
    adjoint, potential = adjoint_model(ou_model)
    x = np.array([[-1.0], [2.0]])
    np.testing.assert_allclose(adjoint.drift(x), x, atol=1e-8)
    np.testing.assert_allclose(potential(x), 1.0, atol=1e-6)
    assert adjoint.d2 == 0


def test_negative_time_rejected(ou_backend, bump_values):
    with pytest.raises(OffGridTimeError):
        heat_semigroup(ou_backend, -0.1, bump_values)
    with pytest.raises(OffGridTimeError):
        adjoint_semigroup(ou_backend, -0.1, bump_values)


def test_sampled_function_must_fit_the_grid(ou_backend):
    with pytest.raises(DimensionMismatchError):
        ou_backend.sample(np.ones(7))
    with pytest.raises(DimensionMismatchError):
        ou_backend.sample(gaussian_bump(dim=2))


def test_monte_carlo_matches_ou_law(ou_model):
    x0, t = 0.5, 0.5
    backend = MonteCarloBackend(ou_model, [[x0]], n_paths=20_000, dt=1e-2, seed=9)
    estimate = heat_semigroup(backend, t, cosine_wave())
    mean, var = x0 * np.exp(-t), 0.5 * (1.0 - np.exp(-2 * t))
    exact = np.cos(mean) * np.exp(-0.5 * var)
    assert abs(estimate.mean[0] - exact) < 5 * estimate.stderr[0] + 0.01


def test_monte_carlo_transpose_unsupported(ou_model):
    backend = MonteCarloBackend(ou_model, [[0.0]], n_paths=10)
    with pytest.raises(UnsupportedError):
        adjoint_semigroup(backend, 0.1, cosine_wave(), form=AdjointForm.TRANSPOSE)


def test_h1_norm_adds_the_derivative(bm_model):
    grid = SpatialGrid(np.pi, 201)
    backend = GridBackend(bm_model, grid)
    assert h1_norm(backend, bm_model, np.sin(grid.axis)) == pytest.approx(2.0, abs=1e-3)
    assert h1_norm(backend, bm_model, np.ones(grid.size)) == pytest.approx(1.0, abs=1e-12)


def test_first_order_operators(bm_model, small_grid):
    backend = GridBackend(bm_model, small_grid)
    sine = ScalarField(1, lambda x: np.sin(x[..., 0]), lambda x: np.cos(x[..., 0])[..., None])
    scaled = apply_first_order(backend, linear_field([[1.0]]), sine)
    x = np.linspace(-2.0, 2.0, 9)[:, None]
    np.testing.assert_allclose(scaled(x), x[:, 0] * np.cos(x[:, 0]), atol=1e-12)
    # second-order differences are exact on linear functions, edges included
    slope = apply_first_order(backend, constant_field([1.0]), small_grid.axis.copy())
    np.testing.assert_allclose(slope, 1.0, atol=1e-10)


def test_brownian_second_moment(bm_model, small_grid):
    backend = GridBackend(bm_model, small_grid)
    square = polynomial_sensor([0.0, 0.0, 1.0])
    values = heat_semigroup(backend, 0.5, square)
    assert values[small_grid.index_of(0.0)] == pytest.approx(0.5, abs=1e-6)
    mc = MonteCarloBackend(bm_model, [[0.0]], n_paths=20_000, dt=1e-2, seed=4)
    estimate = heat_semigroup(mc, 0.5, square)
    assert abs(estimate.mean[0] - 0.5) < 5 * estimate.stderr[0]


def test_quadratic_potential_matches_cameron_martin(bm_model):
    grid = SpatialGrid(6.0, 241)
    backend = GridBackend(bm_model, grid)
    potential = polynomial_sensor([0.0, 0.0, -0.5])
    values = perturbed_semigroup(backend, 1.0, np.ones(grid.size), potential)
    assert values[grid.index_of(0.0)] == pytest.approx(np.cosh(1.0) ** -0.5, abs=1e-3)


def test_grid_and_monte_carlo_agree(ou_model, ou_backend, small_grid):
    grid_value = heat_semigroup(ou_backend, 0.5, cosine_wave())[small_grid.index_of(0.5)]
    mc = MonteCarloBackend(ou_model, [[0.5]], n_paths=20_000, dt=1e-2, seed=21)
    estimate = heat_semigroup(mc, 0.5, cosine_wave())
    assert abs(estimate.mean[0] - grid_value) < 5 * estimate.stderr[0] + 0.01
