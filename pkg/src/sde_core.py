"""Signal and observation simulation.

The signal solves a Stratonovich SDE driven by fields V0..V_d1. It is
simulated by Euler-Maruyama on the equivalent Ito form, whose drift
b = V0 + 1/2 sum_i DV_i V_i is assembled once per model. Observations are
Y_{k+1} = Y_k + h(X_k) dt + dW_k.

Randomness is organised in chunks of paths; chunk c of stream s under root
seed r draws from SeedSequence(r, spawn_key=(s, c)), so results do not
depend on how many worker threads consume the chunks.
"""

import hashlib
import json
import logging
from collections.abc import Callable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Any

import numpy as np

from src.constants import LOGGER_NAME, PATH_CHUNK_SIZE, RandomStream
from src.errors import ConfigError, DimensionMismatchError, DivergenceError, OffGridTimeError
from src.ufg_algebra import ScalarField, VectorField

logger = logging.getLogger(LOGGER_NAME)


@dataclass(frozen=True)
class SdeModel:
    """Fields V0..V_d1 (V0 is the drift), sensors h_1..h_d2 and the UFG order."""

    fields: tuple[VectorField, ...]
    sensors: tuple[ScalarField, ...] = ()
    ufg_ell: int = 1
    name: str = "custom"
    description: Mapping[str, Any] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self) -> None:
        if len(self.fields) < 2:
            raise ConfigError("a model needs a drift V0 and at least one driving field", "model")
        dims = {f.dim for f in self.fields} | {h.dim for h in self.sensors}
        if len(dims) != 1:
            raise DimensionMismatchError(f"fields and sensors disagree on the dimension: {dims}")
        if self.ufg_ell < 1:
            raise ConfigError(f"ufg_ell must be >= 1, got {self.ufg_ell}", "model.ufg_ell")

    @property
    def N(self) -> int:
        return self.fields[0].dim

    @property
    def d1(self) -> int:
        return len(self.fields) - 1

    @property
    def d2(self) -> int:
        return len(self.sensors)

    @property
    def drift(self) -> VectorField:
        return self.fields[0]

    @property
    def diffusions(self) -> tuple[VectorField, ...]:
        return self.fields[1:]

    def ito_drift(self, x: np.ndarray) -> np.ndarray:
        b = self.drift.value(x)
        for V in self.diffusions:
            b = b + 0.5 * np.einsum("...ij,...j->...i", V.jacobian(x), V.value(x))
        return b

    @cached_property
    def ito_drift_field(self) -> VectorField:
        return VectorField.from_value(self.N, self.ito_drift, name="b")

    def diffusion_matrix(self, x: np.ndarray) -> np.ndarray:
        """sum_i V_i V_i^T, shape (..., N, N)."""
        a = np.zeros((*np.shape(x), self.N))
        for V in self.diffusions:
            v = V.value(x)
            a = a + v[..., :, None] * v[..., None, :]
        return a

    def generator_apply(self, f: ScalarField, x: np.ndarray) -> np.ndarray:
        """(A f)(x) with A = V0 + 1/2 sum_i V_i^2, from the gradient and Hessian of f."""
        first = np.einsum("...i,...i->...", self.ito_drift(x), f.gradient(x))
        second = 0.5 * np.einsum("...ij,...ij->...", self.diffusion_matrix(x), f.hessian(x))
        return first + second

    def sensor_values(self, x: np.ndarray) -> np.ndarray:
        """h(x) stacked on the last axis, shape (..., d2)."""
        if not self.sensors:
            return np.zeros((*np.shape(x)[:-1], 0))
        return np.stack([h.value(x) for h in self.sensors], axis=-1)

    def without_sensors(self) -> "SdeModel":
        return replace(self, sensors=(), name=f"{self.name}/unobserved")


def model_hash(model: SdeModel) -> str:
    payload = json.dumps(
        {"name": model.name, "description": model.description}, sort_keys=True, default=str
    )
    return hashlib.sha256(payload.encode("utf8")).hexdigest()


# --- Random streams ---
def substream(seed: int, stream: RandomStream, chunk: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(int(stream), chunk)))


def chunk_sizes(n_paths: int, chunk_size: int = PATH_CHUNK_SIZE) -> list[int]:
    full, rest = divmod(n_paths, chunk_size)
    return [chunk_size] * full + ([rest] if rest else [])


def run_chunked[T](
    n_paths: int,
    seed: int,
    stream: RandomStream,
    kernel: Callable[[np.random.Generator, int], T],
    chunk_size: int = PATH_CHUNK_SIZE,
    threads: int = 1,
) -> list[T]:
    """Evaluate `kernel(rng, n)` per chunk, in chunk order, optionally in a thread pool."""
    sizes = chunk_sizes(n_paths, chunk_size)
    jobs = [(substream(seed, stream, c), n) for c, n in enumerate(sizes)]
    if threads <= 1 or len(jobs) == 1:
        return [kernel(rng, n) for rng, n in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda job: kernel(*job), jobs))


# --- Time grids and paths ---
@dataclass(frozen=True, eq=False)
class PathGrid:
    """Uniform time grid with driving increments dB and an observation path Y."""

    times: np.ndarray
    dB: np.ndarray
    Y: np.ndarray
    seed: int | None = None

    def __post_init__(self) -> None:
        M = len(self.times) - 1
        if M < 1:
            raise DimensionMismatchError("a path grid needs at least one step")
        if self.dB.shape[0] != M or self.Y.shape[0] != M + 1:
            raise DimensionMismatchError(
                f"{M} steps but dB has {self.dB.shape[0]} rows and Y has {self.Y.shape[0]}"
            )
        steps = np.diff(self.times)
        if not np.allclose(steps, steps[0], rtol=1e-9, atol=0.0):
            raise DimensionMismatchError("path grids must be uniform")
        if self.Y.size and not np.all(self.Y[0] == 0.0):
            raise DimensionMismatchError("observation paths start at Y_0 = 0")

    @property
    def M(self) -> int:
        return len(self.times) - 1

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def dt(self) -> float:
        return self.T / self.M

    @property
    def d1(self) -> int:
        return self.dB.shape[1]

    @property
    def d2(self) -> int:
        return self.Y.shape[1]

    @property
    def dY(self) -> np.ndarray:
        return np.diff(self.Y, axis=0)

    def index_of(self, t: float) -> int:
        """Grid index of time t; t must coincide with a grid point."""
        k = round(t / self.dt)
        if k < 0 or k > self.M or abs(k * self.dt - t) > 1e-9 * max(self.T, 1.0):
            raise OffGridTimeError(f"time {t} is not a point of the grid with step {self.dt}")
        return k

    def truncated(self, t: float) -> "PathGrid":
        k = self.index_of(t)
        return PathGrid(self.times[: k + 1], self.dB[:k], self.Y[: k + 1], self.seed)

    def with_observation(self, Y: np.ndarray) -> "PathGrid":
        return replace(self, Y=np.asarray(Y, dtype=float))

    def coarsened(self, factor: int) -> "PathGrid":
        """Every `factor`-th grid point; increments are summed so paths stay the same."""
        if self.M % factor:
            raise DimensionMismatchError(f"{self.M} steps are not divisible by {factor}")
        dB = self.dB.reshape(self.M // factor, factor, self.d1).sum(axis=1)
        return PathGrid(self.times[::factor], dB, self.Y[::factor], self.seed)


def uniform_times(T: float, M: int) -> np.ndarray:
    return np.linspace(0.0, T, M + 1)


def make_path_grid(T: float, M: int, d1: int, d2: int, seed: int) -> PathGrid:
    """Driving increments and a Brownian observation path (the reference-measure law of Y)."""
    dt = T / M
    dB = substream(seed, RandomStream.SIGNAL).normal(scale=np.sqrt(dt), size=(M, d1))
    dW = substream(seed, RandomStream.OBSERVATION).normal(scale=np.sqrt(dt), size=(M, d2))
    Y = np.vstack([np.zeros((1, d2)), np.cumsum(dW, axis=0)])
    return PathGrid(uniform_times(T, M), dB, Y, seed)


# --- Euler-Maruyama ---
def euler_step(model: SdeModel, x: np.ndarray, dB: np.ndarray, dt: float) -> np.ndarray:
    """One Euler-Maruyama step on the Ito form; dB has shape (..., d1)."""
    x_next = x + model.ito_drift(x) * dt
    for i, V in enumerate(model.diffusions):
        x_next = x_next + V.value(x) * dB[..., i : i + 1]
    return x_next


def _check_finite(x: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(x)):
        raise DivergenceError(step)


def simulate_signal(model: SdeModel, x0: Sequence[float], grid: PathGrid) -> np.ndarray:
    """State at every grid time, driven by the increments stored on the grid."""
    if grid.d1 != model.d1:
        raise DimensionMismatchError(f"grid carries {grid.d1} noises, model needs {model.d1}")
    X = np.empty((grid.M + 1, model.N))
    X[0] = np.asarray(x0, dtype=float)
    for k in range(grid.M):
        X[k + 1] = euler_step(model, X[k], grid.dB[k], grid.dt)
        _check_finite(X[k + 1], k + 1)
    return X


def simulate_observation(
    model: SdeModel, signal: np.ndarray, grid: PathGrid, dW: np.ndarray
) -> np.ndarray:
    if signal.shape != (grid.M + 1, model.N):
        raise DimensionMismatchError(f"signal shape {signal.shape} does not match the grid")
    if dW.shape != (grid.M, model.d2):
        raise DimensionMismatchError(f"dW shape {dW.shape}, expected {(grid.M, model.d2)}")
    drift = model.sensor_values(signal[:-1]) * grid.dt
    return np.vstack([np.zeros((1, model.d2)), np.cumsum(drift + dW, axis=0)])


def jacobian_flow(model: SdeModel, x0: Sequence[float], grid: PathGrid) -> np.ndarray:
    """Variational Euler scheme, J[k] = dX_k / dx0 with J[0] = I."""
    X = simulate_signal(model, x0, grid)
    J = np.empty((grid.M + 1, model.N, model.N))
    J[0] = np.eye(model.N)
    for k in range(grid.M):
        x = X[k]
        step = model.ito_drift_field.jacobian(x) * grid.dt
        for i, V in enumerate(model.diffusions):
            step = step + V.jacobian(x) * grid.dB[k, i]
        J[k + 1] = J[k] + step @ J[k]
        _check_finite(J[k + 1], k + 1)
    return J


def observe_path(model: SdeModel, x0: Sequence[float], T: float, M: int, seed: int) -> PathGrid:
    """Simulate the signal and return the grid whose Y it generates."""
    base = make_path_grid(T, M, model.d1, max(model.d2, 1), seed)
    X = simulate_signal(model, x0, base)
    dW = np.diff(base.Y, axis=0)[:, : model.d2]
    Y = simulate_observation(model, X, base, dW)
    logger.debug(f"Observed path for {model.name}: T={T}, M={M}, seed={seed}")
    return PathGrid(base.times, base.dB, Y, seed)


def euler_paths(
    model: SdeModel,
    x0: np.ndarray,
    dt: float,
    steps: int,
    n_paths: int,
    rng: np.random.Generator,
    on_step: Callable[[int, np.ndarray], None] | None = None,
) -> np.ndarray:
    """Batch Euler-Maruyama from every starting point in x0 (shape (Q, N)).

    The same Brownian increments drive all starting points. `on_step(k, X)`
    sees the state X_k of shape (Q, n_paths, N) before step k is taken.
    Returns X at the final time.
    """
    X = np.broadcast_to(np.asarray(x0, dtype=float)[:, None, :], (len(x0), n_paths, model.N))
    X = X.copy()
    for k in range(steps):
        if on_step is not None:
            on_step(k, X)
        dB = rng.normal(scale=np.sqrt(dt), size=(n_paths, model.d1))
        X = euler_step(model, X, dB[None, :, :], dt)
        _check_finite(X, k + 1)
    return X


def simulate_paths(
    model: SdeModel,
    x0: Sequence[float],
    T: float,
    M: int,
    n_paths: int,
    seed: int,
    threads: int = 1,
    chunk_size: int = PATH_CHUNK_SIZE,
) -> np.ndarray:
    """Terminal states X_T of n_paths independent signals, shape (n_paths, N)."""
    start = np.asarray(x0, dtype=float)[None, :]

    def kernel(rng: np.random.Generator, n: int) -> np.ndarray:
        return euler_paths(model, start, T / M, M, n, rng)[0]

    return np.concatenate(
        run_chunked(n_paths, seed, RandomStream.SIGNAL, kernel, chunk_size, threads)
    )


def steps_for(t: float, dt: float) -> tuple[int, float]:
    """Number of uniform steps covering [0, t] with step at most dt, and the step used."""
    if t < 0:
        raise OffGridTimeError(f"negative time {t}")
    if t == 0:
        return 0, dt
    n = max(1, int(np.ceil(t / dt - 1e-9)))
    return n, t / n


def finite_difference_flow(
    model: SdeModel, x0: Sequence[float], grid: PathGrid, eps: float = 1e-4
) -> np.ndarray:
    """Centered differences of the Euler flow in the starting point (shares grid noise)."""
    x0 = np.asarray(x0, dtype=float)
    columns = []
    for j in range(model.N):
        e = np.zeros(model.N)
        e[j] = eps
        plus = simulate_signal(model, x0 + e, grid)
        minus = simulate_signal(model, x0 - e, grid)
        columns.append((plus - minus) / (2 * eps))
    return np.stack(columns, axis=-1)

