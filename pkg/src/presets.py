"""Bundled models and field factories.

Presets:
    linear-gaussian: dX = -a X dt + sigma dB, h(x) = gain * x.
    cubic-sensor:    dX = -a X dt + sigma dB, h(x) = tanh(x^3).
    bm-1d:           dX = dB, h(x) = gain * x (h = 0 by default).
    ou-tanh:         dX = -a X dt + sigma dB, h(x) = tanh(scale * x).
    bm-2d:           planar Brownian motion, h = 0.
"""

from collections.abc import Mapping, Sequence
from typing import Any

import numpy as np
from numpy.polynomial import Polynomial

from src.constants import Preset
from src.errors import ConfigError
from src.sde_core import SdeModel
from src.ufg_algebra import ScalarField, VectorField


# --- Vector fields ---
def constant_field(vector: Sequence[float], name: str = "c") -> VectorField:
    v = np.asarray(vector, dtype=float)
    dim = v.size
    return VectorField(
        dim=dim,
        value=lambda x: np.broadcast_to(v, x.shape).copy(),
        jacobian=lambda x: np.zeros((*x.shape, dim)),
        name=name,
    )


def linear_field(
    matrix: Sequence[Sequence[float]], offset: Sequence[float] | None = None, name: str = "Ax"
) -> VectorField:
    A = np.atleast_2d(np.asarray(matrix, dtype=float))
    c = np.zeros(A.shape[0]) if offset is None else np.asarray(offset, dtype=float)
    return VectorField(
        dim=A.shape[0],
        value=lambda x: np.einsum("ij,...j->...i", A, x) + c,
        jacobian=lambda x: np.broadcast_to(A, (*x.shape[:-1], *A.shape)).copy(),
        name=name,
    )


def polynomial_field(coefficients: Sequence[float], name: str = "p") -> VectorField:
    """One-dimensional field x -> sum_k c_k x^k."""
    p = Polynomial(coefficients)
    dp = p.deriv()
    return VectorField(
        dim=1,
        value=lambda x: p(x[..., 0])[..., None],
        jacobian=lambda x: dp(x[..., 0])[..., None, None],
        name=name,
    )


# --- Sensors ---
def linear_sensor(gain: float) -> ScalarField:
    if gain == 0.0:
        return ScalarField.constant(1, 0.0)
    return ScalarField(
        dim=1,
        value=lambda x: gain * x[..., 0],
        gradient=lambda x: np.full(x.shape, gain),
        hessian_fn=lambda x: np.zeros((*x.shape, 1)),
        name=f"{gain:g}x",
    )


def tanh_sensor(power: int = 1, scale: float = 1.0) -> ScalarField:
    """h(x) = tanh(scale * x^power)."""
    inner = Polynomial([0.0] * power + [scale])
    d_inner = inner.deriv()
    dd_inner = d_inner.deriv()

    def gradient(x: np.ndarray) -> np.ndarray:
        y = x[..., 0]
        return ((1.0 - np.tanh(inner(y)) ** 2) * d_inner(y))[..., None]

    def hessian(x: np.ndarray) -> np.ndarray:
        y = x[..., 0]
        th = np.tanh(inner(y))
        sech2 = 1.0 - th**2
        return (-2.0 * th * sech2 * d_inner(y) ** 2 + sech2 * dd_inner(y))[..., None, None]

    return ScalarField(
        dim=1,
        value=lambda x: np.tanh(inner(x[..., 0])),
        gradient=gradient,
        hessian_fn=hessian,
        name=f"tanh({scale:g}x^{power})",
    )


def polynomial_sensor(coefficients: Sequence[float]) -> ScalarField:
    p = Polynomial(coefficients)
    dp, ddp = p.deriv(), p.deriv(2)
    return ScalarField(
        dim=1,
        value=lambda x: p(x[..., 0]),
        gradient=lambda x: dp(x[..., 0])[..., None],
        hessian_fn=lambda x: ddp(x[..., 0])[..., None, None],
        name="poly",
    )


# --- Models ---
def _ou_fields(a: float, sigma: float) -> tuple[VectorField, VectorField]:
    return linear_field([[-a]], name=f"-{a:g}x"), constant_field([sigma], name=f"{sigma:g}")


def build_preset(preset: Preset, params: Mapping[str, Any] | None = None) -> SdeModel:
    params = dict(params or {})
    description = {"preset": str(preset), "params": params}
    a = float(params.get("a", 1.0))
    sigma = float(params.get("sigma", 1.0))
    match preset:
        case Preset.LINEAR_GAUSSIAN:
            sensor = linear_sensor(float(params.get("gain", 1.0)))
            return SdeModel(_ou_fields(a, sigma), (sensor,), 1, str(preset), description)
        case Preset.CUBIC_SENSOR:
            sensor = tanh_sensor(power=3, scale=float(params.get("scale", 1.0)))
            return SdeModel(_ou_fields(a, sigma), (sensor,), 1, str(preset), description)
        case Preset.OU_TANH:
            sensor = tanh_sensor(power=1, scale=float(params.get("scale", 1.0)))
            return SdeModel(_ou_fields(a, sigma), (sensor,), 1, str(preset), description)
        case Preset.BM_1D:
            fields = (constant_field([0.0], "0"), constant_field([1.0], "d/dx"))
            sensor = linear_sensor(float(params.get("gain", 0.0)))
            return SdeModel(fields, (sensor,), 1, str(preset), description)
        case Preset.BM_2D:
            fields = (
                constant_field([0.0, 0.0], "0"),
                constant_field([1.0, 0.0], "d/dx1"),
                constant_field([0.0, 1.0], "d/dx2"),
            )
            return SdeModel(fields, (ScalarField.constant(2, 0.0),), 1, str(preset), description)
        case _:
            raise ConfigError(f"unknown preset '{preset}'", "model.preset")


def polynomial_model(
    drift: Sequence[float],
    diffusions: Sequence[Sequence[float]],
    sensors: Sequence[Mapping[str, Any]],
    ufg_ell: int = 1,
) -> SdeModel:
    """Custom one-dimensional model with polynomial fields.

    Sensors are mappings {"kind": "polynomial", "coefficients": [...]} or
    {"kind": "tanh", "power": p, "scale": s}.
    """
    fields = (
        polynomial_field(drift, "V0"),
        *(polynomial_field(c, f"V{i + 1}") for i, c in enumerate(diffusions)),
    )
    built: list[ScalarField] = []
    for i, entry in enumerate(sensors):
        kind = entry.get("kind", "polynomial")
        if kind == "polynomial":
            built.append(polynomial_sensor(entry["coefficients"]))
        elif kind == "tanh":
            built.append(tanh_sensor(int(entry.get("power", 1)), float(entry.get("scale", 1.0))))
        else:
            raise ConfigError(f"unknown sensor kind '{kind}'", f"model.sensors.{i}.kind")
    description = {
        "preset": str(Preset.CUSTOM),
        "drift": list(drift),
        "diffusions": [list(c) for c in diffusions],
        "sensors": [dict(s) for s in sensors],
        "ufg_ell": ufg_ell,
    }
    return SdeModel(fields, tuple(built), ufg_ell, str(Preset.CUSTOM), description)


# --- Test functions ---
def gaussian_bump(dim: int = 1, centre: float = 0.0, width: float = 1.0) -> ScalarField:
    """exp(-|x - centre|^2 / (2 width^2))."""

    def value(x: np.ndarray) -> np.ndarray:
        return np.exp(-np.sum((x - centre) ** 2, axis=-1) / (2 * width**2))

    def gradient(x: np.ndarray) -> np.ndarray:
        return -(x - centre) / width**2 * value(x)[..., None]

    def hessian(x: np.ndarray) -> np.ndarray:
        r = (x - centre) / width**2
        outer = r[..., :, None] * r[..., None, :] - np.eye(dim) / width**2
        return outer * value(x)[..., None, None]

    return ScalarField(dim, value, gradient, hessian, name=f"bump({centre:g},{width:g})")


def cosine_wave(frequency: float = 1.0) -> ScalarField:
    return ScalarField(
        dim=1,
        value=lambda x: np.cos(frequency * x[..., 0]),
        gradient=lambda x: -frequency * np.sin(frequency * x[..., 0])[..., None],
        hessian_fn=lambda x: -(frequency**2) * np.cos(frequency * x[..., 0])[..., None, None],
        name=f"cos({frequency:g}x)",
    )


def named_function(
    kind: str, dim: int = 1, width: float = 0.005, centre: float = 0.0, frequency: float = 1.0
) -> ScalarField:
    """Named test functions: one, identity, step (tanh(x / width)), gaussian, cos."""
    match kind:
        case "one":
            return ScalarField.constant(dim, 1.0)
        case "gaussian":
            return gaussian_bump(dim, centre, width)
    if dim != 1:
        raise ConfigError(f"test function '{kind}' is one-dimensional", "phi.kind")
    match kind:
        case "identity":
            return polynomial_sensor([0.0, 1.0])
        case "step":
            return tanh_sensor(power=1, scale=1.0 / width)
        case "cos":
            return cosine_wave(frequency)
        case _:
            raise ConfigError(f"unknown test function '{kind}'", "phi.kind")
