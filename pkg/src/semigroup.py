"""Heat, perturbed and adjoint semigroups on a grid or by Monte Carlo.

The grid backend discretises A = b.grad + 1/2 a:Hess (b the Ito drift,
a = sum_i V_i V_i^T) by central differences on [-L, L]^N with reflecting
ghost points, so D1 vanishes and D2 = 2 (f_1 - f_0) / dx^2 on the boundary
rows. Constants are then preserved exactly by every propagator.

Test functions are either ScalarField callables or arrays sampled on the
grid (C order over the axes).
"""

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.interpolate import RegularGridInterpolator
from scipy.sparse.linalg import SuperLU, expm_multiply, splu

from src.constants import (
    BOUNDARY_LAYER,
    CN_MAX_SUBSTEP,
    DEFAULT_GRID_POINTS,
    DEFAULT_HALF_WIDTH,
    DENSE_LIMIT,
    LOGGER_NAME,
    PATH_CHUNK_SIZE,
    AdjointForm,
    PropagationMethod,
    RandomStream,
)
from src.errors import (
    DimensionMismatchError,
    OffGridTimeError,
    UnsupportedError,
)
from src.sde_core import SdeModel, euler_paths, run_chunked, steps_for
from src.ufg_algebra import (
    ScalarField,
    VectorField,
    bracket_field,
    enumerate_A0,
    finite_difference_jacobian,
)

logger = logging.getLogger(LOGGER_NAME)

type TestFunction = ScalarField | np.ndarray
type Potential = ScalarField | float | None


# --- Spatial grid ---
@dataclass(frozen=True)
class SpatialGrid:
    half_width: float = DEFAULT_HALF_WIDTH
    points: int = DEFAULT_GRID_POINTS
    dim: int = 1

    def __post_init__(self) -> None:
        if self.dim not in (1, 2):
            raise UnsupportedError(f"grids are 1-D or 2-D, got dim={self.dim}")
        if self.points < 3 or self.half_width <= 0:
            raise DimensionMismatchError(
                f"need at least 3 points and L > 0, got n={self.points}, L={self.half_width}"
            )

    @cached_property
    def axis(self) -> np.ndarray:
        return np.linspace(-self.half_width, self.half_width, self.points)

    @property
    def dx(self) -> float:
        return 2.0 * self.half_width / (self.points - 1)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.points,) * self.dim

    @property
    def size(self) -> int:
        return self.points**self.dim

    @property
    def cell_volume(self) -> float:
        return self.dx**self.dim

    @cached_property
    def nodes(self) -> np.ndarray:
        """Grid points, shape (size, dim)."""
        mesh = np.meshgrid(*([self.axis] * self.dim), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def interior_mask(self, layer: int = BOUNDARY_LAYER) -> np.ndarray:
        idx = np.arange(self.points)
        inner = (idx >= layer) & (idx < self.points - layer)
        mask = inner
        for _ in range(self.dim - 1):
            mask = np.logical_and.outer(mask, inner)
        return mask.ravel()

    def index_of(self, x: float) -> int:
        """Index of a 1-D grid point."""
        i = round((x + self.half_width) / self.dx)
        if i < 0 or i >= self.points or abs(self.axis[i] - x) > 1e-9 * self.dx:
            raise OffGridTimeError(f"{x} is not a node of the spatial grid")
        return i


def _first_difference(n: int, dx: float) -> sp.csr_matrix:
    D = sp.diags([-np.ones(n - 1), np.ones(n - 1)], [-1, 1]).tolil()
    D[0, 1] = 0.0
    D[n - 1, n - 2] = 0.0
    return sp.csr_matrix(D.tocsr() / (2.0 * dx))


def _second_difference(n: int, dx: float) -> sp.csr_matrix:
    D = sp.diags([np.ones(n - 1), -2.0 * np.ones(n), np.ones(n - 1)], [-1, 0, 1]).tolil()
    D[0, 1] = 2.0
    D[n - 1, n - 2] = 2.0
    return sp.csr_matrix(D.tocsr() / dx**2)


def _on_axis(D: sp.spmatrix, axis: int, grid: SpatialGrid) -> sp.csr_matrix:
    eye = sp.identity(grid.points, format="csr")
    factors = [D if k == axis else eye for k in range(grid.dim)]
    result = factors[0]
    for f in factors[1:]:
        result = sp.kron(result, f, format="csr")
    return sp.csr_matrix(result)


def assemble_generator(model: SdeModel, grid: SpatialGrid) -> sp.csr_matrix:
    """Sparse A_h = sum_j b_j D_j + 1/2 sum_jk a_jk D_j D_k with reflecting boundaries."""
    if model.N != grid.dim:
        raise DimensionMismatchError(f"model on R^{model.N} cannot live on a {grid.dim}-D grid")
    x = grid.nodes
    b = model.ito_drift(x)
    a = model.diffusion_matrix(x)
    first = [_on_axis(_first_difference(grid.points, grid.dx), j, grid) for j in range(grid.dim)]
    second = [_on_axis(_second_difference(grid.points, grid.dx), j, grid) for j in range(grid.dim)]
    A = sp.csr_matrix((grid.size, grid.size))
    for j in range(grid.dim):
        A = A + sp.diags(b[:, j]) @ first[j]
        for k in range(grid.dim):
            D2 = second[j] if j == k else first[j] @ first[k]
            A = A + 0.5 * sp.diags(a[:, j, k]) @ D2
    logger.debug(f"Assembled generator for {model.name}: {grid.size} nodes, nnz={A.nnz}")
    return sp.csr_matrix(A)


# --- Propagators ---
@dataclass(eq=False)
class GridOperator:
    """exp(t A) for a fixed sparse generator, applied to vectors or column blocks."""

    grid: SpatialGrid
    generator: sp.csr_matrix
    method: PropagationMethod = PropagationMethod.AUTO
    dense_limit: int = DENSE_LIMIT
    cn_substep: float = CN_MAX_SUBSTEP
    _dense: dict[float, np.ndarray] = field(default_factory=dict, repr=False)
    _factors: dict[float, tuple] = field(default_factory=dict, repr=False)

    @cached_property
    def resolved_method(self) -> PropagationMethod:
        if self.method != PropagationMethod.AUTO:
            return self.method
        if self.grid.size <= self.dense_limit:
            return PropagationMethod.EXPM
        return PropagationMethod.CRANK_NICOLSON

    def matrix(self, t: float) -> np.ndarray:
        """Dense propagator exp(t A_h); cached per time."""
        key = round(t, 14)
        if key not in self._dense:
            if self.resolved_method == PropagationMethod.EXPM:
                self._dense[key] = scipy.linalg.expm(t * self.generator.toarray())
            else:
                self._dense[key] = self.apply(t, np.eye(self.grid.size))
        return self._dense[key]

    def _crank_nicolson(self, t: float) -> tuple[int, SuperLU, sp.csr_matrix]:
        steps = max(1, math.ceil(t / self.cn_substep - 1e-9))
        tau = t / steps
        key = round(tau, 14)
        if key not in self._factors:
            eye = sp.identity(self.grid.size, format="csc")
            implicit = splu(sp.csc_matrix(eye - 0.5 * tau * self.generator))
            explicit = sp.csr_matrix(eye + 0.5 * tau * self.generator)
            self._factors[key] = (implicit, explicit)
        implicit, explicit = self._factors[key]
        return steps, implicit, explicit

    def apply(self, t: float, f: np.ndarray) -> np.ndarray:
        if t < 0:
            raise OffGridTimeError(f"semigroups run forward only, got t={t}")
        f = np.asarray(f, dtype=float)
        if t == 0:
            return f.copy()
        match self.resolved_method:
            case PropagationMethod.EXPM:
                return self.matrix(t) @ f
            case PropagationMethod.EXPM_MULTIPLY:
                return expm_multiply(t * self.generator, f)
            case _:
                steps, implicit, explicit = self._crank_nicolson(t)
                for _ in range(steps):
                    f = implicit.solve(explicit @ f)
                return f

    def apply_transpose(self, t: float, g: np.ndarray) -> np.ndarray:
        """exp(t A_h)^T g, the exact grid adjoint under uniform quadrature."""
        if t < 0:
            raise OffGridTimeError(f"semigroups run forward only, got t={t}")
        g = np.asarray(g, dtype=float)
        if t == 0:
            return g.copy()
        match self.resolved_method:
            case PropagationMethod.EXPM:
                return self.matrix(t).T @ g
            case PropagationMethod.EXPM_MULTIPLY:
                return expm_multiply(t * sp.csr_matrix(self.generator.T), g)
            case _:
                steps, implicit, explicit = self._crank_nicolson(t)
                for _ in range(steps):
                    g = explicit.T @ implicit.solve(g, trans="T")
                return g


# --- Backends ---
class GridBackend:
    """Finite-difference semigroups for one model on one spatial grid."""

    def __init__(
        self,
        model: SdeModel,
        grid: SpatialGrid | None = None,
        method: PropagationMethod = PropagationMethod.AUTO,
        dense_limit: int = DENSE_LIMIT,
        cn_substep: float = CN_MAX_SUBSTEP,
    ) -> None:
        self.model = model
        self.grid = grid or SpatialGrid(dim=model.N)
        self.method = method
        self.dense_limit = dense_limit
        self.cn_substep = cn_substep
        self.generator = assemble_generator(model, self.grid)
        self._operators: dict[object, GridOperator] = {}
        logger.info(
            f"Grid backend for {model.name}: n={self.grid.points}, L={self.grid.half_width}, "
            f"dim={self.grid.dim}, method={self.operator().resolved_method}"
        )

    @property
    def x(self) -> np.ndarray:
        return self.grid.nodes

    def operator(self, potential: Potential = None) -> GridOperator:
        key: object = potential if isinstance(potential, ScalarField) else float(potential or 0.0)
        if key not in self._operators:
            generator = self.generator
            if isinstance(potential, ScalarField):
                generator = generator + sp.diags(potential(self.x))
            elif potential:
                generator = generator + float(potential) * sp.identity(self.grid.size)
            self._operators[key] = GridOperator(
                self.grid,
                sp.csr_matrix(generator),
                self.method,
                self.dense_limit,
                self.cn_substep,
            )
        return self._operators[key]

    def sample(self, phi: TestFunction) -> np.ndarray:
        if isinstance(phi, ScalarField):
            if phi.dim != self.grid.dim:
                raise DimensionMismatchError(f"{phi.dim}-D function on a {self.grid.dim}-D grid")
            return np.asarray(phi(self.x), dtype=float)
        values = np.asarray(phi, dtype=float)
        if values.shape[0] != self.grid.size:
            raise DimensionMismatchError(
                f"grid function has {values.shape[0]} values, the grid has {self.grid.size} nodes"
            )
        return values

    def propagate(self, t: float, phi: TestFunction, potential: Potential = None) -> np.ndarray:
        return self.operator(potential).apply(t, self.sample(phi))

    def apply_generator(self, f: np.ndarray) -> np.ndarray:
        return self.generator @ f

    def gradient(self, f: np.ndarray) -> np.ndarray:
        """Central differences inside, second-order one-sided at the boundary; shape (size, dim)."""
        values = f.reshape(self.grid.shape)
        parts = np.gradient(values, self.grid.dx, edge_order=2)
        if self.grid.dim == 1:
            parts = [parts]
        return np.stack([p.ravel() for p in parts], axis=-1)

    def first_order(self, V: VectorField, f: np.ndarray) -> np.ndarray:
        return V.apply(self.gradient(f), self.x)

    def sup_norm(self, f: np.ndarray, layer: int = BOUNDARY_LAYER) -> float:
        interior = np.abs(f[self.grid.interior_mask(layer)])
        return float(interior.max()) if interior.size else 0.0

    def argmax_in_boundary_layer(self, f: np.ndarray, layer: int = BOUNDARY_LAYER) -> bool:
        return not self.grid.interior_mask(layer)[int(np.argmax(np.abs(f)))]

    def inner(self, f: np.ndarray, g: np.ndarray) -> float:
        return float(np.sum(f * g) * self.grid.cell_volume)

    def interpolate(self, f: np.ndarray, x: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(x, dtype=float))
        if self.grid.dim == 1:
            return np.interp(points[:, 0], self.grid.axis, f)
        axes = (self.grid.axis,) * self.grid.dim
        interpolator = RegularGridInterpolator(axes, f.reshape(self.grid.shape))
        return interpolator(points)


@dataclass(frozen=True)
class MonteCarloEstimate:
    mean: np.ndarray
    stderr: np.ndarray
    n_paths: int


class MonteCarloBackend:
    """Feynman-Kac estimator E[phi(X_t^x) exp(int_0^t c(X_s^x) ds)] at fixed query points."""

    def __init__(
        self,
        model: SdeModel,
        query_points: np.ndarray,
        n_paths: int = 10_000,
        dt: float = 1e-3,
        seed: int = 0,
        threads: int = 1,
        chunk_size: int = PATH_CHUNK_SIZE,
    ) -> None:
        self.model = model
        self.query_points = np.atleast_2d(np.asarray(query_points, dtype=float))
        if self.query_points.shape[-1] != model.N:
            raise DimensionMismatchError(f"query points must lie in R^{model.N}")
        self.n_paths = n_paths
        self.dt = dt
        self.seed = seed
        self.threads = threads
        self.chunk_size = chunk_size

    def propagate(
        self, t: float, phi: ScalarField, potential: Potential = None
    ) -> MonteCarloEstimate:
        if not isinstance(phi, ScalarField):
            raise DimensionMismatchError("the Monte Carlo backend needs callable test functions")
        steps, dt = steps_for(t, self.dt)
        c = potential if isinstance(potential, ScalarField) else None
        constant = 0.0 if isinstance(potential, ScalarField) else float(potential or 0.0)

        def kernel(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
            log_weight = np.zeros((len(self.query_points), n))

            def accumulate(_k: int, X: np.ndarray) -> None:
                if c is not None:
                    log_weight[...] += c(X) * dt

            X_t = euler_paths(self.model, self.query_points, dt, steps, n, rng, accumulate)
            values = phi(X_t) * np.exp(log_weight + constant * t)
            return values.sum(axis=1), (values**2).sum(axis=1)

        partial = run_chunked(
            self.n_paths, self.seed, RandomStream.SIGNAL, kernel, self.chunk_size, self.threads
        )
        total = np.sum([p[0] for p in partial], axis=0)
        total_sq = np.sum([p[1] for p in partial], axis=0)
        mean = total / self.n_paths
        variance = np.maximum(total_sq / self.n_paths - mean**2, 0.0)
        stderr = np.sqrt(variance / max(self.n_paths - 1, 1))
        return MonteCarloEstimate(mean, stderr, self.n_paths)


type Backend = GridBackend | MonteCarloBackend


# --- Adjoint model ---
def adjoint_model(model: SdeModel, potential: Potential = None) -> tuple[SdeModel, ScalarField]:
    """Fields and potential of the formal adjoint.

    With d_j = div V_j, the adjoint of A + c is the generator with fields
    (-V0 + sum_j d_j V_j, V1, ..., Vd) plus the potential
    c - div V0 + 1/2 sum_j V_j(d_j) + 1/2 sum_j d_j^2.
    """
    drift, diffusions = model.drift, model.diffusions

    def new_drift(x: np.ndarray) -> np.ndarray:
        v = -drift.value(x)
        for V in diffusions:
            v = v + V.divergence(x)[..., None] * V.value(x)
        return v

    def grad_div(V: VectorField, x: np.ndarray) -> np.ndarray:
        return finite_difference_jacobian(lambda y: V.divergence(y)[..., None], x)[..., 0, :]

    def new_potential(x: np.ndarray) -> np.ndarray:
        c = -drift.divergence(x)
        for V in diffusions:
            d = V.divergence(x)
            c = c + 0.5 * V.apply(grad_div(V, x), x) + 0.5 * d**2
        if isinstance(potential, ScalarField):
            c = c + potential(x)
        elif potential:
            c = c + float(potential)
        return c

    adjoint = SdeModel(
        (VectorField.from_value(model.N, new_drift, name=f"{drift.name}*"), *diffusions),
        (),
        model.ufg_ell,
        f"{model.name}/adjoint",
        {"adjoint_of": dict(model.description)},
    )
    return adjoint, ScalarField.from_value(model.N, new_potential, name="c*")


# --- Operations ---
def heat_semigroup(
    backend: Backend, t: float, phi: TestFunction
) -> np.ndarray | MonteCarloEstimate:
    return perturbed_semigroup(backend, t, phi, None)


def perturbed_semigroup(
    backend: Backend, t: float, phi: TestFunction, c: Potential
) -> np.ndarray | MonteCarloEstimate:
    if t < 0:
        raise OffGridTimeError(f"semigroups run forward only, got t={t}")
    return backend.propagate(t, phi, c)


def adjoint_semigroup(
    backend: Backend,
    t: float,
    g: TestFunction,
    c: Potential = None,
    form: AdjointForm = AdjointForm.FORMULA,
    adjoint_backend: GridBackend | None = None,
) -> np.ndarray | MonteCarloEstimate:
    """P_t* g. `transpose` is the exact grid adjoint; `formula` runs the adjoint diffusion.

    A prebuilt `adjoint_backend` (same grid, adjoint model) avoids reassembly
    across repeated calls.
    """
    if t < 0:
        raise OffGridTimeError(f"semigroups run forward only, got t={t}")
    if form == AdjointForm.TRANSPOSE:
        if not isinstance(backend, GridBackend):
            raise UnsupportedError("the transpose adjoint exists only on the grid backend")
        return backend.operator(c).apply_transpose(t, backend.sample(g))
    model, c_adj = adjoint_model(backend.model, c)
    if isinstance(backend, MonteCarloBackend):
        mc = MonteCarloBackend(
            model, backend.query_points, backend.n_paths, backend.dt, backend.seed, backend.threads
        )
        return mc.propagate(t, g, c_adj)
    target = adjoint_backend or GridBackend(
        model, backend.grid, backend.method, backend.dense_limit, backend.cn_substep
    )
    return target.propagate(t, backend.sample(g), c_adj)


def apply_first_order(backend: Backend, V: VectorField, phi: TestFunction) -> TestFunction:
    """V phi = V . grad phi, analytic for callables and by grid differences otherwise."""
    if isinstance(phi, ScalarField):
        return ScalarField.from_value(
            phi.dim, lambda x: V.apply(phi.gradient(x), x), name=f"{V.name}({phi.name})"
        )
    if not isinstance(backend, GridBackend):
        raise UnsupportedError("grid-sampled functions need the grid backend")
    return backend.first_order(V, backend.sample(phi))


def h1_norm(
    backend: GridBackend, model: SdeModel, phi: TestFunction, ell: int | None = None
) -> float:
    """sum over alpha in A0(ell) of the interior sup-norm of V_[alpha] phi."""
    values = backend.sample(phi)
    total = backend.sup_norm(values)
    for alpha in enumerate_A0(ell or model.ufg_ell, model.d1)[1:]:
        V = bracket_field(model.fields, alpha)
        total += backend.sup_norm(backend.first_order(V, values))
    return total


# --- Property checks ---
def semigroup_property_residual(
    backend: GridBackend, s: float, t: float, phi: TestFunction
) -> float:
    values = backend.sample(phi)
    direct = backend.propagate(s + t, values)
    composed = backend.propagate(s, backend.propagate(t, values))
    return float(np.max(np.abs(direct - composed)))


def positivity_minimum(backend: GridBackend, t: float, phi: TestFunction) -> float:
    return float(np.min(backend.propagate(t, phi)))


def constant_preservation_error(backend: GridBackend, t: float) -> float:
    ones = np.ones(backend.grid.size)
    return backend.sup_norm(backend.propagate(t, ones) - 1.0)
