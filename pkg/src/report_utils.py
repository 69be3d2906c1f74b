"""Report Utilities Module.

Helpers shared by every subcommand for locating resources, creating result
directories and writing CSV tables, path files and JSON manifests.
"""

import csv
import hashlib
import json
import logging
import os
import sys
from collections.abc import Iterable, Sequence
from datetime import datetime
from typing import Any

import numpy as np

from src.constants import DEFAULT_RESULTS_ROOT, LOGGER_NAME, RESULTS_ENV_VAR
from src.errors import ConfigError, DimensionMismatchError
from src.sde_core import PathGrid

logger = logging.getLogger(LOGGER_NAME)

PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def resource_path(relative_path: str) -> str:
    """Get absolute path to resource, works for dev and PyInstaller.

    This function helps finding resources whether the script is run directly
    or from a bundled executable created with PyInstaller.
    """
    try:
        base_path = str(sys._MEIPASS)  # type: ignore[attr-defined]
    except AttributeError:
        base_path = PROJECT_ROOT
    return os.path.join(base_path, relative_path)


# --- Result directories ---
def results_root(override: str | None = None) -> str:
    """--results-dir, then the environment variable, then ./results."""
    return override or os.environ.get(RESULTS_ENV_VAR) or DEFAULT_RESULTS_ROOT


def run_directory(subcommand: str, root: str | None = None, seed: int | None = None) -> str:
    formatted_time = datetime.now().strftime("%Y%m%d-%H%M%S")
    name = f"{subcommand}_{formatted_time}" + (f"_s{seed}" if seed is not None else "")
    directory = os.path.join(results_root(root), name)
    os.makedirs(directory, exist_ok=True)
    logger.info(f"Writing results to {directory}")
    return directory


def config_hash(config: dict[str, Any]) -> str:
    payload = json.dumps(config, sort_keys=True, default=str)
    return hashlib.sha256(payload.encode("utf8")).hexdigest()


def write_manifest(
    directory: str,
    subcommand: str,
    config: dict[str, Any],
    outputs: Sequence[str] = (),
    summary: dict[str, Any] | None = None,
) -> str:
    """manifest.json with the fully resolved configuration and its hash."""
    manifest = {
        "subcommand": subcommand,
        "created": datetime.now().isoformat(timespec="seconds"),
        "config": config,
        "config_hash": config_hash(config),
        "outputs": list(outputs),
        "summary": summary or {},
    }
    path = os.path.join(directory, "manifest.json")
    with open(path, "w", encoding="utf8") as json_file:
        json.dump(manifest, json_file, indent=4, default=str)
    return path


# --- CSV ---
def _cell(value: Any) -> Any:
    if isinstance(value, bool | np.bool_):
        return str(bool(value)).lower()
    if isinstance(value, float | np.floating):
        return repr(float(value))
    return value


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    with open(path, "w", newline="", encoding="utf8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
    logger.debug(f"Wrote {path}")
    return path


def write_path_csv(path: str, grid: PathGrid, signal: np.ndarray | None = None) -> str:
    """Columns time, X_1..X_N (when given), Y_1..Y_d2, dB_1..dB_d1.

    The dB cells of the last row are empty.
    """
    n_state = 0 if signal is None else signal.shape[1]
    header = (
        ["time"]
        + [f"X_{i + 1}" for i in range(n_state)]
        + [f"Y_{i + 1}" for i in range(grid.d2)]
        + [f"dB_{i + 1}" for i in range(grid.d1)]
    )
    rows = []
    for k, t in enumerate(grid.times):
        state = [] if signal is None else [float(v) for v in signal[k]]
        dB = [float(v) for v in grid.dB[k]] if k < grid.M else [""] * grid.d1
        rows.append([float(t), *state, *map(float, grid.Y[k]), *dB])
    return write_csv(path, header, rows)


def read_path_csv(path: str, seed: int | None = None) -> PathGrid:
    """Observation path from CSV; driving increments default to zero when absent."""
    if not os.path.isfile(path):
        raise ConfigError(f"path file {path} does not exist", "path_file")
    with open(path, newline="", encoding="utf8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        rows = list(reader)
    if not header or header[0] != "time" or not rows:
        raise DimensionMismatchError(f"{path}: expected a header starting with 'time' and rows")
    y_cols = [j for j, name in enumerate(header) if name.startswith("Y_")]
    b_cols = [j for j, name in enumerate(header) if name.startswith("dB_")]
    times = np.array([float(r[0]) for r in rows])
    Y = np.array([[float(r[j]) for j in y_cols] for r in rows]).reshape(len(rows), len(y_cols))
    if b_cols:
        dB = np.array([[float(r[j]) for j in b_cols] for r in rows[:-1]])
    else:
        dB = np.zeros((len(rows) - 1, 1))
    return PathGrid(times, dB.reshape(len(rows) - 1, -1), Y, seed)
