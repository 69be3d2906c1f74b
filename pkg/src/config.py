"""Experiment configuration.

A run is described by one JSON document validated against `ExperimentConfig`.
Unknown keys are rejected; CLI flags are merged over the file before
validation, so the manifest always records the resolved configuration.
"""

import json
import logging
import os
from collections.abc import Mapping
from typing import Any, Literal, Self

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.constants import (
    CN_MAX_SUBSTEP,
    DEFAULT_GRID_POINTS,
    DEFAULT_HALF_WIDTH,
    DENSE_LIMIT,
    DICTIONARY_VERSION,
    LOGGER_NAME,
    MAX_EXPANSION_LEVEL,
    PATH_CHUNK_SIZE,
    AdjointForm,
    BackendKind,
    ExtensionSchedule,
    Oracle,
    Preset,
    PropagationMethod,
    PsiForm,
    Target,
)
from src.errors import ConfigError
from src.presets import build_preset, named_function, polynomial_model
from src.sde_core import SdeModel
from src.semigroup import GridBackend, MonteCarloBackend, SpatialGrid
from src.ufg_algebra import MultiIndex, ScalarField

logger = logging.getLogger(LOGGER_NAME)

PRESET_PARAMETERS = frozenset({"a", "sigma", "gain", "scale"})


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SensorConfig(StrictModel):
    kind: Literal["polynomial", "tanh"] = "polynomial"
    coefficients: list[float] | None = None
    power: int = Field(1, ge=1)
    scale: float = 1.0

    @model_validator(mode="after")
    def _coefficients_for_polynomials(self) -> Self:
        if self.kind == "polynomial" and not self.coefficients:
            raise ValueError("polynomial sensors need coefficients")
        return self


class ModelConfig(StrictModel):
    """A bundled preset with overridable coefficients, or a custom 1-D polynomial model."""

    preset: Preset = Preset.LINEAR_GAUSSIAN
    params: dict[str, float] = Field(default_factory=dict)
    drift: list[float] | None = None
    diffusions: list[list[float]] | None = None
    sensors: list[SensorConfig] = Field(default_factory=list)
    ufg_ell: int = Field(1, ge=1)
    x0: list[float] = Field(default_factory=lambda: [0.0])

    @model_validator(mode="after")
    def _check_model(self) -> Self:
        if self.preset == Preset.CUSTOM:
            if self.drift is None or not self.diffusions:
                raise ValueError("custom models need 'drift' and 'diffusions'")
        elif unknown := set(self.params) - PRESET_PARAMETERS:
            raise ValueError(f"unknown preset parameters {sorted(unknown)}")
        return self


class GridConfig(StrictModel):
    half_width: float = Field(DEFAULT_HALF_WIDTH, gt=0)
    points: int = Field(DEFAULT_GRID_POINTS, ge=3)
    dim: Literal[1, 2] = 1
    dense_limit: int = Field(DENSE_LIMIT, ge=1)
    cn_substep: float = Field(CN_MAX_SUBSTEP, gt=0)
    method: PropagationMethod = PropagationMethod.AUTO


class TimeConfig(StrictModel):
    T: float = Field(1.0, gt=0)
    steps: int = Field(1000, ge=1)

    @property
    def dt(self) -> float:
        return self.T / self.steps


class MonteCarloConfig(StrictModel):
    n_paths: int = Field(10_000, ge=1)
    n_particles: int = Field(10_000, ge=1)
    chunk_size: int = Field(PATH_CHUNK_SIZE, ge=1)
    dt: float = Field(1e-3, gt=0)


class PhiConfig(StrictModel):
    """Test function phi; `width` is the step width or the bump width."""

    kind: Literal["one", "identity", "step", "gaussian", "cos"] = "identity"
    width: float = Field(0.005, gt=0)
    centre: float = 0.0
    frequency: float = 1.0


class ExperimentConfig(StrictModel):
    model: ModelConfig = Field(default_factory=ModelConfig)
    grid: GridConfig = Field(default_factory=GridConfig)
    time: TimeConfig = Field(default_factory=TimeConfig)
    monte_carlo: MonteCarloConfig = Field(default_factory=MonteCarloConfig)
    phi: PhiConfig = Field(default_factory=PhiConfig)
    backend: BackendKind = BackendKind.GRID
    seed: int = Field(0, ge=0)
    y_seed: int | None = Field(None, ge=0)
    threads: int = Field(1, ge=1)
    path_file: str | None = None
    levels: int = Field(3, ge=0, le=MAX_EXPANSION_LEVEL)
    k: int = Field(4, ge=1, le=MAX_EXPANSION_LEVEL)
    gamma: float = Field(0.45, gt=0, lt=0.5)
    times: list[float] | None = None
    n_scenarios: int = Field(200, ge=2)
    dictionary_version: int = Field(DICTIONARY_VERSION, ge=1, le=DICTIONARY_VERSION)
    oracle: Oracle = Oracle.KALMAN
    target: Target = Target.HEAT
    alpha: list[int] = Field(default_factory=lambda: [1])
    beta: list[int] = Field(default_factory=list)
    halvings: int = Field(3, ge=1)
    schedule: ExtensionSchedule = ExtensionSchedule.DYADIC
    adjoint_form: AdjointForm = AdjointForm.FORMULA
    psi_form: PsiForm = PsiForm.COMMUTATOR

    @property
    def observation_seed(self) -> int:
        return self.seed if self.y_seed is None else self.y_seed

    @property
    def alpha_index(self) -> MultiIndex:
        return MultiIndex(tuple(self.alpha))

    @property
    def beta_index(self) -> MultiIndex:
        return MultiIndex(tuple(self.beta))


# --- Loading ---
def _merge(base: dict[str, Any], overrides: Mapping[str, Any]) -> dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, Mapping):
            nested = _merge(merged.get(key) or {}, value)
            if nested:
                merged[key] = nested
        elif value is not None:
            merged[key] = value
    return merged


def load_config(
    path: str | None = None, overrides: Mapping[str, Any] | None = None
) -> ExperimentConfig:
    """Read the JSON file (if any), merge CLI overrides and validate."""
    data: dict[str, Any] = {}
    if path:
        if not os.path.isfile(path):
            raise ConfigError(f"config file {path} does not exist", "config")
        with open(path, encoding="utf8") as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path} is not valid JSON: {e}", "config") from e
    return ExperimentConfig.model_validate(_merge(data, overrides or {}))


def error_key_path(error: ValidationError) -> str:
    """Dotted location of the first offending key, e.g. 'model.drift'."""
    first = error.errors()[0]
    return ".".join(str(part) for part in first["loc"]) or "<root>"


def resolved(config: ExperimentConfig) -> dict[str, Any]:
    return config.model_dump(mode="json")


# --- Builders ---
def build_model(config: ModelConfig) -> SdeModel:
    if config.preset == Preset.CUSTOM:
        sensors = [s.model_dump(exclude_none=True) for s in config.sensors]
        drift, diffusions = config.drift or [], config.diffusions or []
        return polynomial_model(drift, diffusions, sensors, config.ufg_ell)
    return build_preset(config.preset, config.params)


def build_test_function(config: PhiConfig, dim: int = 1) -> ScalarField:
    return named_function(config.kind, dim, config.width, config.centre, config.frequency)


def build_grid_backend(config: ExperimentConfig, model: SdeModel) -> GridBackend:
    if config.grid.dim != model.N:
        raise ConfigError(
            f"grid dimension {config.grid.dim} does not match the model dimension {model.N}",
            "grid.dim",
        )
    grid = SpatialGrid(config.grid.half_width, config.grid.points, config.grid.dim)
    return GridBackend(
        model, grid, config.grid.method, config.grid.dense_limit, config.grid.cn_substep
    )


def build_backend(
    config: ExperimentConfig, model: SdeModel, query_points: np.ndarray | None = None
) -> GridBackend | MonteCarloBackend:
    if config.backend == BackendKind.GRID:
        return build_grid_backend(config, model)
    points = np.atleast_2d(config.model.x0 if query_points is None else query_points)
    return MonteCarloBackend(
        model,
        points,
        n_paths=config.monte_carlo.n_paths,
        dt=config.monte_carlo.dt,
        seed=config.seed,
        threads=config.threads,
        chunk_size=config.monte_carlo.chunk_size,
    )
