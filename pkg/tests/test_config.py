import json

import numpy as np
import pytest
from pydantic import ValidationError

from src.config import (
    ExperimentConfig,
    build_backend,
    build_grid_backend,
    build_model,
    build_test_function,
    error_key_path,
    load_config,
    resolved,
)
from src.constants import BackendKind, Preset, Target
from src.errors import ConfigError
from src.report_utils import resource_path
from src.semigroup import GridBackend, MonteCarloBackend


def test_defaults():
    config = load_config()
    assert config.levels == 3
    assert config.k == 4
    assert config.gamma == 0.45
    assert config.time.T == 1.0
    assert config.time.steps == 1000
    assert config.grid.points == 401
    assert config.backend == BackendKind.GRID
    assert config.target == Target.HEAT
    assert config.alpha_index.entries == (1,)
    assert config.beta_index.is_empty
    assert config.observation_seed == config.seed


def test_unknown_keys_are_rejected():
    with pytest.raises(ValidationError) as info:
        load_config(overrides={"model": {"bogus": 1}})
    assert error_key_path(info.value) == "model.bogus"


@pytest.mark.parametrize(
    ("overrides", "key"),
    [
        ({"gamma": 0.5}, "gamma"),
        ({"levels": 99}, "levels"),
        ({"n_scenarios": 1}, "n_scenarios"),
        ({"dictionary_version": 2}, "dictionary_version"),
        ({"grid": {"points": 2}}, "grid.points"),
        ({"model": {"preset": "custom"}}, "model"),
        ({"model": {"params": {"omega": 1.0}}}, "model"),
    ],
)
def test_invalid_values(overrides, key):
    with pytest.raises(ValidationError) as info:
        load_config(overrides=overrides)
    assert error_key_path(info.value) == key


def test_config_files(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"seed": 4, "time": {"T": 0.5, "steps": 50}, "y_seed": 9}))
    config = load_config(str(path), {"time": {"steps": 64, "T": None}, "seed": None})
    assert config.seed == 4
    assert config.time.T == 0.5
    assert config.time.steps == 64
    assert config.time.dt == pytest.approx(0.5 / 64)
    assert config.observation_seed == 9


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError) as info:
        load_config(str(tmp_path / "absent.json"))
    assert info.value.key_path == "config"
    broken = tmp_path / "broken.json"
    broken.write_text("{seed: 1")
    with pytest.raises(ConfigError):
        load_config(str(broken))


def test_custom_model():
    config = load_config(
        overrides={
            "model": {
                "preset": "custom",
                "drift": [0.0, -2.0],
                "diffusions": [[1.0]],
                "sensors": [{"kind": "tanh", "power": 1, "scale": 0.5}],
            }
        }
    )
    model = build_model(config.model)
    assert (model.N, model.d1, model.d2) == (1, 1, 1)
    assert model.sensor_values(np.array([[2.0]]))[0, 0] == pytest.approx(np.tanh(1.0))


def test_polynomial_sensors_need_coefficients():
    with pytest.raises(ValidationError):
        load_config(overrides={"model": {"sensors": [{"kind": "polynomial"}]}})


def test_backends():
    config = load_config(overrides={"grid": {"points": 41}})
    model = build_model(config.model)
    assert isinstance(build_backend(config, model), GridBackend)
    mc = load_config(overrides={"backend": "mc", "monte_carlo": {"n_paths": 100}})
    backend = build_backend(mc, model)
    assert isinstance(backend, MonteCarloBackend)


def test_grid_dimension_must_match_the_model():
    config = load_config(overrides={"model": {"preset": "bm-2d"}, "grid": {"points": 11}})
    with pytest.raises(ConfigError) as info:
        build_grid_backend(config, build_model(config.model))
    assert info.value.key_path == "grid.dim"


def test_test_function_from_config():
    config = load_config(overrides={"phi": {"kind": "gaussian", "width": 0.5, "centre": 1.0}})
    phi = build_test_function(config.phi)
    assert phi(np.array([[1.0]]))[0] == pytest.approx(1.0)


def test_resolved_config_is_json():
    config = ExperimentConfig(model={"preset": Preset.OU_TANH})
    data = resolved(config)
    assert data["model"]["preset"] == "ou-tanh"
    assert json.loads(json.dumps(data)) == data


@pytest.mark.parametrize("name", ["linear_gaussian.json", "cubic_sensor_gradient.json"])
def test_bundled_configurations_validate(name):
    config = load_config(resource_path(f"resources/{name}"))
    assert config.seed > 0
