import numpy as np
import pytest

from src.constants import Preset
from src.errors import ConfigError
from src.presets import (
    build_preset,
    gaussian_bump,
    named_function,
    polynomial_model,
    tanh_sensor,
)
from src.ufg_algebra import finite_difference_jacobian


@pytest.mark.parametrize(
    ("preset", "dim", "d1", "d2"),
    [
        (Preset.LINEAR_GAUSSIAN, 1, 1, 1),
        (Preset.CUBIC_SENSOR, 1, 1, 1),
        (Preset.BM_1D, 1, 1, 1),
        (Preset.OU_TANH, 1, 1, 1),
        (Preset.BM_2D, 2, 2, 1),
    ],
)
def test_preset_dimensions(preset, dim, d1, d2):
    model = build_preset(preset)
    assert (model.N, model.d1, model.d2) == (dim, d1, d2)
    assert model.name == str(preset)


def test_custom_preset_needs_the_polynomial_builder():
    with pytest.raises(ConfigError):
        build_preset(Preset.CUSTOM)


def test_preset_parameters_reach_the_fields():
    model = build_preset(Preset.LINEAR_GAUSSIAN, {"a": 3.0, "sigma": 0.5, "gain": 2.0})
    x = np.array([[1.5]])
    assert model.drift(x)[0, 0] == pytest.approx(-4.5)
    assert model.diffusions[0](x)[0, 0] == pytest.approx(0.5)
    assert model.sensor_values(x)[0, 0] == pytest.approx(3.0)


def test_tanh_sensor_derivatives():
    h = tanh_sensor(power=3, scale=0.7)
    x = np.linspace(-1.5, 1.5, 9)[:, None]
    numeric = finite_difference_jacobian(lambda y: h(y)[..., None], x)[..., 0, :]
    np.testing.assert_allclose(h.grad(x), numeric, atol=1e-7)
    numeric_hessian = finite_difference_jacobian(h.gradient, x)
    np.testing.assert_allclose(h.hessian(x), numeric_hessian, atol=1e-6)


def test_gaussian_bump_gradient_in_two_dimensions():
    bump = gaussian_bump(dim=2, centre=0.5, width=0.8)
    x = np.array([[0.1, -0.3], [1.0, 0.9]])
    numeric = finite_difference_jacobian(lambda y: bump(y)[..., None], x)[..., 0, :]
    np.testing.assert_allclose(bump.grad(x), numeric, atol=1e-8)
    assert bump(np.array([[0.5, 0.5]]))[0] == pytest.approx(1.0)


def test_named_functions():
    x = np.array([[-0.01], [0.0], [0.02]])
    step = named_function("step", width=0.01)
    np.testing.assert_allclose(step(x), np.tanh(x[:, 0] / 0.01))
    np.testing.assert_allclose(named_function("identity")(x), x[:, 0])
    np.testing.assert_allclose(named_function("one", dim=2)(np.zeros((3, 2))), 1.0)
    np.testing.assert_allclose(named_function("cos", frequency=2.0)(x), np.cos(2 * x[:, 0]))


@pytest.mark.parametrize(("kind", "dim"), [("square", 1), ("step", 2), ("cos", 2)])
def test_named_function_errors(kind, dim):
    with pytest.raises(ConfigError) as info:
        named_function(kind, dim=dim)
    assert info.value.key_path == "phi.kind"


def test_polynomial_model():
    model = polynomial_model(
        [0.0, -1.0], [[1.0, 0.5]], [{"kind": "tanh", "power": 1, "scale": 2.0}], ufg_ell=2
    )
    x = np.array([[0.4]])
    assert model.ufg_ell == 2
    assert model.diffusions[0](x)[0, 0] == pytest.approx(1.2)
    assert model.sensor_values(x)[0, 0] == pytest.approx(np.tanh(0.8))
    with pytest.raises(ConfigError):
        polynomial_model([0.0], [[1.0]], [{"kind": "spline"}])
