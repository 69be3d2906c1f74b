"""Small-time gradient exponents of the heat, unnormalised and normalised semigroups."""

import logging
from collections.abc import Sequence
from itertools import pairwise

import numpy as np

from src.constants import (
    FIT_MARGIN,
    GRADIENT_SCALES,
    GRADIENT_T_MAX,
    LOGGER_NAME,
    MIN_FIT_SCALES,
    ORDERING_TOLERANCE,
    QUOTIENT_GUARD,
    VACUOUS_NORM,
    Target,
)
from src.data_models import CheckReport, ExponentReport
from src.errors import (
    BoundaryContaminationError,
    ConfigError,
    DegenerateFitError,
    DegenerateWeightsError,
    InvalidIndexError,
    UnsupportedError,
    VacuousFitError,
)
from src.filtering import rho_grid
from src.sde_core import PathGrid
from src.semigroup import GridBackend, TestFunction, apply_first_order
from src.ufg_algebra import EMPTY, MultiIndex, bracket_field, degree

logger = logging.getLogger(LOGGER_NAME)


def dyadic_times(t_max: float = GRADIENT_T_MAX, scales: int = GRADIENT_SCALES) -> list[float]:
    return [t_max * 2.0**-j for j in range(scales)]


def _inner(backend: GridBackend, beta: MultiIndex, phi: TestFunction) -> np.ndarray:
    if beta.is_empty:
        return backend.sample(phi)
    V = bracket_field(backend.model.fields, beta)
    return backend.sample(apply_first_order(backend, V, phi))


def _outer(backend: GridBackend, alpha: MultiIndex, f: np.ndarray) -> np.ndarray:
    if alpha.is_empty:
        return f
    return backend.first_order(bracket_field(backend.model.fields, alpha), f)


def _rho_pair(
    backend: GridBackend, path: PathGrid, t: float, g: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """rho_t(g) and rho_t(1) as functions of the starting point."""
    truncated = path.truncated(t)
    return rho_grid(backend, truncated, g), rho_grid(backend, truncated, np.ones_like(g))


def _evaluate(
    backend: GridBackend, target: Target, t: float, g: np.ndarray, path: PathGrid | None
) -> np.ndarray:
    if target == Target.HEAT:
        return backend.propagate(t, g)
    if path is None:
        raise ConfigError(f"the {target} target needs an observation path", "path")
    rho, mass = _rho_pair(backend, path, t, g)
    if target == Target.RHO:
        return rho
    if np.min(mass) < QUOTIENT_GUARD:
        raise DegenerateWeightsError(f"rho_{t}(1) drops to {np.min(mass):.3g}")
    return rho / mass


def gradient_exponent_fit(
    backend: GridBackend,
    target: Target,
    alpha: MultiIndex,
    beta: MultiIndex,
    phi: TestFunction,
    times: Sequence[float] | None = None,
    path: PathGrid | None = None,
    margin: float = FIT_MARGIN,
) -> ExponentReport:
    """Slope of log sup|V_[alpha] T_t(V_[beta] phi)| against log t.

    Passes when the slope is at least -(|alpha| + |beta|)/2 - margin.
    """
    if not isinstance(backend, GridBackend):
        raise UnsupportedError("gradient fits need the grid backend")
    times = sorted({float(t) for t in (times or dyadic_times())}, reverse=True)
    if times[-1] <= 0:
        raise InvalidIndexError("fit times must be positive")
    if len(times) < MIN_FIT_SCALES:
        raise DegenerateFitError(f"{len(times)} time scales, at least {MIN_FIT_SCALES} needed")
    g = _inner(backend, beta, phi)
    differentiated = not (alpha.is_empty and beta.is_empty)
    norms = []
    for t in times:
        values = _outer(backend, alpha, _evaluate(backend, target, t, g, path))
        peak = float(np.max(np.abs(values)))
        if differentiated and peak > VACUOUS_NORM and backend.argmax_in_boundary_layer(values):
            raise BoundaryContaminationError(
                f"sup of V_[{alpha}] T_t(V_[{beta}] phi) at t={t:g} sits in the boundary layer"
            )
        norms.append(backend.sup_norm(values))
    if max(norms) < VACUOUS_NORM:
        raise VacuousFitError(f"all norms below {VACUOUS_NORM:g} for alpha={alpha}, beta={beta}")
    if min(norms) <= 0:
        raise DegenerateFitError("a sampled norm vanished; the log-log fit is undefined")
    slope = float(np.polyfit(np.log(times), np.log(norms), 1)[0])
    theory = -(degree(alpha) + degree(beta)) / 2
    passed = slope >= theory - margin
    logger.info(
        f"{target} alpha={alpha} beta={beta}: slope {slope:.3f} vs {theory:.2f} "
        f"({'pass' if passed else 'fail'})"
    )
    return ExponentReport(alpha, beta, str(target), times, norms, slope, theory, margin, passed)


def normalised_quotient_check(
    backend: GridBackend,
    alpha: MultiIndex,
    beta: MultiIndex,
    phi: TestFunction,
    t: float,
    path: PathGrid,
) -> float:
    """sup |V pi(g) - (V rho(g) rho(1) - rho(g) V rho(1)) / rho(1)^2| with g = V_[beta] phi.

    The left side differentiates the quotient on the grid, the right side its
    factors. Central differences satisfy the product rule only to O(dx^2), so
    with a sensor the residual is that difference error and falls with dx.
    """
    g = _inner(backend, beta, phi)
    rho, mass = _rho_pair(backend, path, t, g)
    if np.min(mass) < QUOTIENT_GUARD:
        raise DegenerateWeightsError(f"rho_{t}(1) drops to {np.min(mass):.3g}")
    lhs = _outer(backend, alpha, rho / mass)
    rhs = (_outer(backend, alpha, rho) * mass - rho * _outer(backend, alpha, mass)) / mass**2
    return backend.sup_norm(lhs - rhs)


def slope_ordering_check(
    backend: GridBackend,
    target: Target,
    phi: TestFunction,
    pairs: Sequence[tuple[MultiIndex, MultiIndex]] | None = None,
    times: Sequence[float] | None = None,
    path: PathGrid | None = None,
    tolerance: float = ORDERING_TOLERANCE,
) -> CheckReport:
    """Fitted slopes must not increase (beyond tolerance) as the derivative order grows."""
    one = MultiIndex((1,))
    pairs = pairs or [(EMPTY, EMPTY), (one, EMPTY), (one, one)]
    reports = [gradient_exponent_fit(backend, target, a, b, phi, times, path) for a, b in pairs]
    slopes = [r.slope for r in reports]
    worst = max((later - earlier for earlier, later in pairwise(slopes)), default=0.0)
    return CheckReport(
        "slope_ordering",
        worst,
        tolerance,
        worst <= tolerance,
        {"pairs": [[str(a), str(b)] for a, b in pairs], "slopes": slopes},
    )
