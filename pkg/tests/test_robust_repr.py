import numpy as np
import pytest

from src.chaos_expansion import r_operator_grid
from src.constants import PsiForm
from src.errors import InvalidIndexError, UnsupportedError
from src.presets import tanh_sensor
from src.robust_repr import (
    MIN_CONVERGENCE_SLOPE,
    PathwiseTerm,
    _sensor_product,
    degree_audit,
    fixture_matches,
    ibp_convergence,
    ibp_level,
    ibp_level1,
    ibp_level2,
    ibp_level3,
    ibp_term_values,
    ibp_terms,
    integrate_by_parts,
    load_term_fixture,
    phi_operator,
    psi_operator,
    robustness_check,
)
from src.sde_core import make_path_grid
from src.semigroup import MonteCarloBackend
from src.ufg_algebra import finite_difference_jacobian


@pytest.mark.parametrize(("level", "count"), [(0, 1), (1, 2), (2, 5), (3, 14)])
def test_term_counts(level, count):
    terms = ibp_terms(level)
    assert len(terms) == count
    assert degree_audit(terms)


def test_terms_match_the_stored_fixture():
    assert fixture_matches()
    fixture = load_term_fixture()
    assert sorted(fixture) == [1, 2, 3]


def test_level_one_labels():
    boundary, interior = ibp_terms(1)
    assert boundary.label == "+ q1 P Phi1"
    assert interior.label == "- P [q1 Psi1] P"


def test_integration_by_parts_adds_the_diagonal_term():
    chained = ibp_terms(1)[1]
    pieces = integrate_by_parts(chained)
    assert len(pieces) == 3
    assert all(p.level == 2 for p in pieces)
    assert pieces[-1].label == "+ P [q1q1 Psi1Phi1] P"


def test_terms_survive_json():
    for term in ibp_terms(3):
        assert PathwiseTerm.from_json(3, term.to_json()) == term


def test_level_four_is_out_of_range():
    with pytest.raises(InvalidIndexError):
        ibp_terms(4)


def test_sensor_product_derivatives():
    product = _sensor_product([tanh_sensor(1, 0.8), tanh_sensor(3, 1.2)])
    x = np.linspace(-1.0, 1.0, 7)[:, None]
    np.testing.assert_allclose(product(x), np.tanh(0.8 * x[:, 0]) * np.tanh(1.2 * x[:, 0] ** 3))
    numeric = finite_difference_jacobian(lambda y: product(y)[..., None], x)[..., 0, :]
    np.testing.assert_allclose(product.grad(x), numeric, atol=1e-7)
    np.testing.assert_allclose(
        product.hessian(x), finite_difference_jacobian(product.gradient, x), atol=1e-6
    )


def test_phi_multiplies_by_sensor_powers(ou_backend, bump_values):
    x = ou_backend.grid.axis
    np.testing.assert_allclose(phi_operator(ou_backend, (1, 1), bump_values), x**2 * bump_values)
    np.testing.assert_array_equal(phi_operator(ou_backend, (), bump_values), bump_values)


def test_commutator_and_formula_agree_to_second_order(ou_backend, bump_values):
    commutator = psi_operator(ou_backend, (1,), bump_values)
    formula = psi_operator(ou_backend, (1,), bump_values, PsiForm.FORMULA)
    x = ou_backend.grid.axis
    # the bump solves f' = -x f, so Psi_1 f = -x f + f' = -2 x f
    assert ou_backend.sup_norm(formula + 2 * x * bump_values) < ou_backend.grid.dx**2
    assert ou_backend.sup_norm(commutator - formula) < ou_backend.grid.dx**2


def test_level_one_matches_the_ito_sum(ou_backend, bump_values):
    path = make_path_grid(0.25, 256, 1, 1, seed=17)
    pathwise = ibp_level1(ou_backend, path, 0.0, 0.25, bump_values)
    direct = r_operator_grid(ou_backend, path, (1,), 0.0, 0.25, bump_values)
    assert ou_backend.sup_norm(pathwise - direct) < 0.05 * ou_backend.sup_norm(direct)


def test_term_values_add_up(ou_backend, short_path, bump_values):
    values = ibp_term_values(ou_backend, short_path, 2, 0.0, 0.4, bump_values)
    assert len(values) == 5
    total = np.sum([v for _, _, v in values], axis=0)
    np.testing.assert_allclose(total, ibp_level(ou_backend, short_path, 2, 0.0, 0.4, bump_values))
    term, coefficient, _ = values[0]
    assert term.outer == 2
    dY = short_path.dY[:, 0]
    assert coefficient == pytest.approx(0.5 * (dY.sum() ** 2 - np.sum(dY**2)))


def test_pathwise_levels_are_lipschitz_in_the_path(ou_backend, short_path, bump_values):
    reports = robustness_check(ou_backend, short_path, bump_values, levels=(1, 2))
    assert [r.level for r in reports] == [1, 2]
    assert all(r.passed for r in reports)
    first = reports[0]
    assert first.ratios[0] == pytest.approx(first.ratios[1], rel=1e-6)


def test_pathwise_errors(ou_model, ou_backend, two_channel_path, short_path, bump_values):
    with pytest.raises(UnsupportedError):
        ibp_term_values(ou_backend, two_channel_path, 2, 0.0, 1.0, bump_values)
    with pytest.raises(InvalidIndexError):
        ibp_term_values(ou_backend, short_path, 0, 0.0, 0.4, bump_values)
    with pytest.raises(InvalidIndexError):
        ibp_level1(ou_backend, short_path, 0.0, 0.4, bump_values, channel=2)
    mc = MonteCarloBackend(ou_model, [[0.0]], n_paths=10)
    with pytest.raises(UnsupportedError):
        ibp_level1(mc, short_path, 0.0, 0.4, bump_values)


@pytest.mark.slow
@pytest.mark.parametrize("seed", [1, 3, 17])
def test_pathwise_levels_converge_as_the_step_halves(ou_backend, bump_values, seed):
    path = make_path_grid(0.25, 256, 1, 1, seed=seed)
    reports = ibp_convergence(ou_backend, path, bump_values, levels=(1, 2, 3), halvings=3)
    assert [r.level for r in reports] == [1, 2, 3]
    for report in reports:
        assert len(report.errors) == 4
        assert report.errors == sorted(report.errors)
        assert report.slope >= MIN_CONVERGENCE_SLOPE
        assert report.passed


def test_level_three_sums_fourteen_terms(ou_backend, short_path, bump_values):
    values = ibp_term_values(ou_backend, short_path, 3, 0.0, 0.4, bump_values)
    assert len(values) == 14
    np.testing.assert_allclose(
        ibp_level3(ou_backend, short_path, 0.0, 0.4, bump_values),
        np.sum([v for _, _, v in values], axis=0),
    )


@pytest.mark.slow
def test_level_two_matches_the_ito_sum(ou_backend, bump_values):
    path = make_path_grid(0.25, 256, 1, 1, seed=17)
    pathwise = ibp_level2(ou_backend, path, 0.0, 0.25, bump_values)
    direct = r_operator_grid(ou_backend, path, (1, 1), 0.0, 0.25, bump_values)
    assert ou_backend.sup_norm(pathwise - direct) < 0.1 * ou_backend.sup_norm(direct)
