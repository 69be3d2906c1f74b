"""Unnormalised filter rho_t, its normalisation pi_t and independent oracles.

All weights use the left-point discretisation
    log Z = sum_k h(X_k) . dY_k - 1/2 |h(X_k)|^2 dt
for a fixed observation path; only the signal noise is random.
"""

import logging
from collections.abc import Sequence

import numpy as np
from scipy.special import logsumexp

from src.constants import (
    DEFAULT_GRID_POINTS,
    DEFAULT_HALF_WIDTH,
    LOGGER_NAME,
    MIN_EFFECTIVE_SAMPLE_SIZE,
    PATH_CHUNK_SIZE,
    WEIGHT_FLOOR,
    RandomStream,
)
from src.data_models import FilterEstimate, KalmanResult, MassBoundReport, ScenarioReport
from src.errors import DegenerateWeightsError, DimensionMismatchError, WeightCollapseError
from src.sde_core import (
    PathGrid,
    SdeModel,
    euler_paths,
    euler_step,
    make_path_grid,
    run_chunked,
    substream,
)
from src.semigroup import GridBackend, SpatialGrid, TestFunction
from src.ufg_algebra import ScalarField

logger = logging.getLogger(LOGGER_NAME)


def _check_path(model: SdeModel, grid: PathGrid) -> None:
    if grid.d2 != model.d2:
        raise DimensionMismatchError(f"path has {grid.d2} channels, model has {model.d2} sensors")


def _log_weight_increment(model: SdeModel, X: np.ndarray, dY: np.ndarray, dt: float) -> np.ndarray:
    h = model.sensor_values(X)
    return h @ dY - 0.5 * np.sum(h**2, axis=-1) * dt


def scenario_seed(seed: int, scenario: int) -> int:
    """Independent root seed for the scenario-th observation path."""
    sequence = np.random.SeedSequence(seed, spawn_key=(int(RandomStream.SCENARIO), scenario))
    return int(sequence.generate_state(1)[0])


def _ratio_stderr(moments: np.ndarray, n: int) -> tuple[float, float, float, float, float]:
    """Means of a = phi Z and b = Z with standard errors, and the delta-method error of a / b."""
    s_a, s_b, s_aa, s_bb, s_ab = moments
    a, b = s_a / n, s_b / n
    var_a = max(s_aa / n - a**2, 0.0)
    var_b = max(s_bb / n - b**2, 0.0)
    cov = s_ab / n - a * b
    ratio = a / b
    var_ratio = max(var_a - 2 * ratio * cov + ratio**2 * var_b, 0.0) / b**2
    scale = max(n - 1, 1)
    return a, b, np.sqrt(var_a / scale), np.sqrt(var_b / scale), np.sqrt(var_ratio / scale)


def rho_mc(
    model: SdeModel,
    x0: Sequence[float],
    grid: PathGrid,
    phi: ScalarField,
    n_paths: int = 10_000,
    seed: int = 0,
    threads: int = 1,
    chunk_size: int = PATH_CHUNK_SIZE,
) -> FilterEstimate:
    """Monte Carlo rho_T(phi) and rho_T(1) at x0 over fresh signal paths."""
    _check_path(model, grid)
    start = np.asarray(x0, dtype=float).reshape(1, model.N)
    dY = grid.dY

    def kernel(rng: np.random.Generator, n: int) -> np.ndarray:
        log_z = np.zeros((1, n))

        def accumulate(k: int, X: np.ndarray) -> None:
            log_z[...] += _log_weight_increment(model, X, dY[k], grid.dt)

        X_T = euler_paths(model, start, grid.dt, grid.M, n, rng, accumulate)
        z = np.exp(log_z[0])
        f = phi(X_T[0])
        a = f * z
        return np.array([a.sum(), z.sum(), (a**2).sum(), (z**2).sum(), (a * z).sum(), z.max()])

    parts = run_chunked(n_paths, seed, RandomStream.FILTER, kernel, chunk_size, threads)
    totals = np.sum(parts, axis=0)
    if totals[5] < WEIGHT_FLOOR:
        raise DegenerateWeightsError(
            f"all {n_paths} weights below {WEIGHT_FLOOR:g}; the observation path is too extreme"
        )
    rho_phi, rho_one, se_phi, se_one, se_pi = _ratio_stderr(totals[:5], n_paths)
    logger.debug(f"rho_mc: rho(phi)={rho_phi:.6g}, rho(1)={rho_one:.6g}, n={n_paths}")
    return FilterEstimate(
        rho_phi=float(rho_phi),
        rho_one=float(rho_one),
        pi_phi=float(rho_phi / rho_one),
        rho_phi_stderr=float(se_phi),
        rho_one_stderr=float(se_one),
        pi_phi_stderr=float(se_pi),
        n_samples=n_paths,
        method="mc",
    )


def rho_grid(backend: GridBackend, grid: PathGrid, phi: TestFunction) -> np.ndarray:
    """x -> rho_T(phi)(x) on the spatial grid.

    Backward recursion v_M = phi, v_k = exp(h . dY_k - 1/2 |h|^2 dt) * P_dt v_{k+1}.
    """
    model = backend.model
    _check_path(model, grid)
    h = model.sensor_values(backend.x)
    propagator = backend.operator()
    v = backend.sample(phi)
    for k in reversed(range(grid.M)):
        weight = np.exp(h @ grid.dY[k] - 0.5 * np.sum(h**2, axis=-1) * grid.dt)
        v = weight * propagator.apply(grid.dt, v)
    return v


def kalman_bucy_oracle(
    a: float,
    sigma: float,
    grid: PathGrid,
    x0: float,
    p0: float = 0.0,
    gain: float = 1.0,
) -> KalmanResult:
    """Euler scheme for dm = -a m dt + P k (dY - k m dt), dP/dt = -2 a P + sigma^2 - k^2 P^2."""
    if grid.d2 != 1:
        raise DimensionMismatchError(f"the Kalman-Bucy oracle is scalar, got {grid.d2} channels")
    m, P = float(x0), float(p0)
    dt = grid.dt
    for dy in grid.dY[:, 0]:
        m, P = (
            m - a * m * dt + P * gain * (dy - gain * m * dt),
            P + (-2.0 * a * P + sigma**2 - gain**2 * P**2) * dt,
        )
    return KalmanResult(mean=m, variance=P)


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = len(weights)
    positions = (rng.uniform() + np.arange(n)) / n
    return np.clip(np.searchsorted(np.cumsum(weights), positions), 0, n - 1)


def particle_filter_oracle(
    model: SdeModel,
    x0: Sequence[float],
    grid: PathGrid,
    phi: ScalarField,
    n_particles: int = 10_000,
    seed: int = 0,
    min_ess: float = MIN_EFFECTIVE_SAMPLE_SIZE,
) -> FilterEstimate:
    """Bootstrap filter with systematic resampling after every weighting step.

    rho_T(1) is estimated by the product of mean weights.
    """
    _check_path(model, grid)
    rng = substream(seed, RandomStream.PARTICLE)
    X = np.tile(np.asarray(x0, dtype=float), (n_particles, 1))
    log_rho_one = 0.0
    lowest_ess = float(n_particles)
    for k in range(grid.M):
        log_w = _log_weight_increment(model, X, grid.dY[k], grid.dt)
        log_total = logsumexp(log_w)
        log_rho_one += log_total - np.log(n_particles)
        normalised = np.exp(log_w - log_total)
        ess = 1.0 / np.sum(normalised**2)
        lowest_ess = min(lowest_ess, ess)
        if ess < min_ess:
            raise WeightCollapseError(k, ess)
        X = X[systematic_resample(normalised, rng)]
        dB = rng.normal(scale=np.sqrt(grid.dt), size=(n_particles, model.d1))
        X = euler_step(model, X, dB, grid.dt)
    if lowest_ess < 0.1 * n_particles:
        logger.warning(f"Particle filter: effective sample size fell to {lowest_ess:.1f}")
    values = phi(X)
    pi_phi = float(values.mean())
    rho_one = float(np.exp(log_rho_one))
    pi_stderr = float(values.std(ddof=1) / np.sqrt(n_particles))
    return FilterEstimate(
        rho_phi=rho_one * pi_phi,
        rho_one=rho_one,
        pi_phi=pi_phi,
        rho_phi_stderr=rho_one * pi_stderr,
        pi_phi_stderr=pi_stderr,
        n_samples=n_particles,
        method="particle",
        min_ess=float(lowest_ess),
    )


def observation_sup_norms(
    model: SdeModel, grid: SpatialGrid | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Grid maxima of |h_i|, |A h_i| and |V_j h_i|, shapes (d2,), (d2,), (d2, d1)."""
    grid = grid or SpatialGrid(DEFAULT_HALF_WIDTH, DEFAULT_GRID_POINTS, model.N)
    x = grid.nodes
    h_sup = np.array([np.max(np.abs(h(x))) for h in model.sensors])
    ah_sup = np.array([np.max(np.abs(model.generator_apply(h, x))) for h in model.sensors])
    vh_sup = np.array(
        [[np.max(np.abs(V.apply(h.grad(x), x))) for V in model.diffusions] for h in model.sensors]
    )
    return h_sup, ah_sup, vh_sup


def mass_bound_constant(model: SdeModel, t: float, grid: SpatialGrid | None = None) -> float:
    """C = max_i (|h_i| + t |A h_i| + (d2 t / 2) sum_j |V_j h_i|^2), sup-norms on the grid."""
    if not model.sensors:
        return 0.0
    h_sup, ah_sup, vh_sup = observation_sup_norms(model, grid)
    per_channel = h_sup + t * ah_sup + 0.5 * model.d2 * t * np.sum(vh_sup**2, axis=1)
    return float(np.max(per_channel))


def mass_lower_bound_check(
    model: SdeModel,
    x0: Sequence[float],
    grid: PathGrid,
    n_paths: int = 10_000,
    seed: int = 0,
    spatial_grid: SpatialGrid | None = None,
    threads: int = 1,
) -> MassBoundReport:
    """1 / rho_t(1) <= exp(C sum_i (sup|Y^i| + sup|Y^i|^2)) on the realised path."""
    C = mass_bound_constant(model, grid.T, spatial_grid)
    sup_y = np.max(np.abs(grid.Y), axis=0)
    log_rhs = C * float(np.sum(sup_y + sup_y**2))
    estimate = rho_mc(model, x0, grid, ScalarField.constant(model.N, 1.0), n_paths, seed, threads)
    log_lhs = -float(np.log(estimate.rho_one))
    report = MassBoundReport(
        lhs=float(np.exp(log_lhs)),
        rhs=float(np.exp(min(log_rhs, 700.0))),
        constant=C,
        log_lhs=log_lhs,
        log_rhs=log_rhs,
        passed=log_lhs <= log_rhs + 1e-12,
    )
    logger.debug(f"Mass bound: log lhs={log_lhs:.4g}, log rhs={log_rhs:.4g}, C={C:.4g}")
    return report


def unconditional_mean_check(
    model: SdeModel,
    x0: Sequence[float],
    T: float,
    M: int,
    phi: ScalarField,
    n_scenarios: int = 200,
    n_paths: int = 2_000,
    seed: int = 0,
    threads: int = 1,
) -> ScenarioReport:
    """Average of rho_mc over Brownian observation paths vs the joint E[phi(X_T) Z_T]."""
    start = np.asarray(x0, dtype=float).reshape(1, model.N)
    values = []
    for s in range(n_scenarios):
        path_seed = scenario_seed(seed, s)
        path = make_path_grid(T, M, model.d1, model.d2, path_seed)
        values.append(rho_mc(model, x0, path, phi, n_paths, path_seed, threads).rho_phi)
    scenario_mean = float(np.mean(values))
    scenario_stderr = float(np.std(values, ddof=1) / np.sqrt(n_scenarios))

    dt = T / M
    n_joint = n_scenarios * n_paths

    def kernel(rng: np.random.Generator, n: int) -> np.ndarray:
        log_z = np.zeros((1, n))
        dW = rng.normal(scale=np.sqrt(dt), size=(M, n, model.d2))

        def accumulate(k: int, X: np.ndarray) -> None:
            h = model.sensor_values(X)
            log_z[...] += np.sum(h * dW[k], axis=-1) - 0.5 * np.sum(h**2, axis=-1) * dt

        X_T = euler_paths(model, start, dt, M, n, rng, accumulate)
        a = phi(X_T[0]) * np.exp(log_z[0])
        return np.array([a.sum(), (a**2).sum()])

    parts = run_chunked(n_joint, seed, RandomStream.SCENARIO, kernel, threads=threads)
    totals = np.sum(parts, axis=0)
    joint_mean = totals[0] / n_joint
    joint_stderr = np.sqrt(max(totals[1] / n_joint - joint_mean**2, 0.0) / (n_joint - 1))
    z = (scenario_mean - joint_mean) / np.hypot(scenario_stderr, joint_stderr)
    return ScenarioReport(
        scenario_mean=scenario_mean,
        scenario_stderr=scenario_stderr,
        joint_mean=float(joint_mean),
        joint_stderr=float(joint_stderr),
        z_score=float(z),
        n_scenarios=n_scenarios,
    )


def z_score(
    estimate: float, stderr: float, reference: float, reference_stderr: float = 0.0
) -> float | None:
    """Standardised gap, or None when neither side carries a sampling error."""
    scale = np.hypot(stderr, reference_stderr)
    if scale == 0:
        return None
    return float((estimate - reference) / scale)
