"""Perturbation series of rho in the observation increments.

Level m collects, over words w = (i_1..i_m) and grid indices
s <= k_1 < ... < k_m < t, the terms
    P_{t_1 - s} H_{i_1} P_{t_2 - t_1} ... H_{i_m} P_{t - t_m} phi dY^{i_1}_{k_1} ... dY^{i_m}_{k_m}
with H_i multiplication by h_i. Everything is evaluated by a backward
recursion over suffixes of w,
    B_()(K) = phi,  B_v(K) = 0,
    B_v(k) = P_dt B_v(k+1) + dY^{v_1}_k H_{v_1} P_dt B_{v[1:]}(k+1),
so a level costs one propagation per time step instead of a simplex sum.
"""

import logging
import math
from collections.abc import Callable, Sequence

import numpy as np
from scipy.special import gamma

from src.constants import (
    DICTIONARY_SIZE,
    DICTIONARY_VERSION,
    LOGGER_NAME,
    MAX_EXPANSION_LEVEL,
    MAX_NORM_DECAY_LEVEL,
    MAX_OBSERVATION_CHANNELS,
    MIN_DYADIC_STEPS,
    VACUOUS_NORM,
    AdjointForm,
)
from src.data_models import ExpansionResult, LevelTerm, NormDecayReport
from src.errors import DegenerateFitError, InvalidIndexError, UnsupportedError
from src.iterated_integrals import LevelSeries, Word, words
from src.sde_core import PathGrid
from src.semigroup import GridBackend, Potential, TestFunction, adjoint_model, h1_norm

logger = logging.getLogger(LOGGER_NAME)

type Step = Callable[[np.ndarray], np.ndarray]


def _check_backend(backend: object) -> GridBackend:
    if not isinstance(backend, GridBackend):
        raise UnsupportedError("the chaos expansion needs the grid backend")
    if backend.model.d2 > MAX_OBSERVATION_CHANNELS:
        raise UnsupportedError(
            f"{backend.model.d2} observation channels, at most {MAX_OBSERVATION_CHANNELS} supported"
        )
    return backend


def _check_level(level: int) -> None:
    if level < 0 or level > MAX_EXPANSION_LEVEL:
        raise InvalidIndexError(f"expansion level {level} outside 0..{MAX_EXPANSION_LEVEL}")


def _forward_step(backend: GridBackend, dt: float, potential: Potential = None) -> Step:
    operator = backend.operator(potential)
    return lambda V: operator.apply(dt, V)


def _backward_suffixes(
    step: Step, h: np.ndarray, dY: np.ndarray, phi: np.ndarray, targets: Sequence[Word]
) -> dict[Word, np.ndarray]:
    """B_v at the first index for every suffix v of the target words."""
    suffixes = sorted({tuple(w[i:]) for w in targets for i in range(len(w) + 1)}, key=len)
    width = phi.shape[1] if phi.ndim == 2 else 1
    state = np.zeros((phi.shape[0], len(suffixes) * width))
    slot = {v: slice(j * width, (j + 1) * width) for j, v in enumerate(suffixes)}
    state[:, slot[()]] = phi.reshape(phi.shape[0], width)
    for k in reversed(range(len(dY))):
        propagated = step(state)
        state = propagated.copy()
        for v in suffixes[1:]:
            channel = v[0] - 1
            weight = dY[k, channel] * h[:, channel][:, None]
            state[:, slot[v]] += weight * propagated[:, slot[v[1:]]]
    shape = phi.shape
    return {v: state[:, slot[v]].reshape(shape) for v in suffixes}


def _apply_stacked(step: Step, levels: np.ndarray) -> np.ndarray:
    """One propagation of every level at once; levels has shape (L, size, ...)."""
    columns = np.moveaxis(levels, 0, -1)
    out = step(columns.reshape(levels.shape[1], -1)).reshape(columns.shape)
    return np.moveaxis(out, -1, 0)


def _kick(h: np.ndarray, dY: np.ndarray, ndim: int) -> np.ndarray:
    """sum_i dY^i h_i on the grid, shaped to broadcast against a function block."""
    return (h @ dY).reshape(-1, *([1] * (ndim - 1)))


def _backward_levels(
    step: Step, h: np.ndarray, dY: np.ndarray, phi: np.ndarray, max_level: int
) -> list[np.ndarray]:
    """Level sums L_m = sum_{|w| = m} B_w at the first index, m = 0..max_level."""
    levels = np.zeros((max_level + 1, *phi.shape))
    levels[0] = phi
    for k in reversed(range(len(dY))):
        propagated = _apply_stacked(step, levels)
        levels = propagated.copy()
        levels[1:] += _kick(h, dY[k], phi.ndim) * propagated[:-1]
    return list(levels)


def _forward_levels(
    step: Step, h: np.ndarray, dY: np.ndarray, g: np.ndarray, max_level: int
) -> list[np.ndarray]:
    """Adjoint level sums, F_m(k+1) = P*_dt (F_m(k) + sum_i dY^i_k H_i F_{m-1}(k))."""
    levels = np.zeros((max_level + 1, *g.shape))
    levels[0] = g
    for k in range(len(dY)):
        kicked = levels.copy()
        kicked[1:] += _kick(h, dY[k], g.ndim) * levels[:-1]
        levels = _apply_stacked(step, kicked)
    return list(levels)


def _span(path: PathGrid, s: float, t: float) -> tuple[int, int]:
    a, b = path.index_of(s), path.index_of(t)
    if a > b:
        raise InvalidIndexError(f"need s <= t, got s={s}, t={t}")
    return a, b


# --- Operations ---
def r_operator_grid(
    backend: GridBackend,
    path: PathGrid,
    word: Sequence[int],
    s: float,
    t: float,
    phi: TestFunction,
) -> np.ndarray:
    """R^w_{s,t} phi on the spatial grid for one nonempty word."""
    backend = _check_backend(backend)
    word = tuple(int(i) for i in word)
    if not word:
        raise InvalidIndexError("R^w needs a nonempty word; the empty word is P_{t-s}")
    _check_level(len(word))
    if any(i < 1 or i > path.d2 for i in word):
        raise InvalidIndexError(f"word {word} uses channels outside 1..{path.d2}")
    a, b = _span(path, s, t)
    h = backend.model.sensor_values(backend.x)
    step = _forward_step(backend, path.dt)
    return _backward_suffixes(step, h, path.dY[a:b], backend.sample(phi), [word])[word]


def level_functions(
    backend: GridBackend, path: PathGrid, s: float, t: float, phi: TestFunction, max_level: int
) -> list[np.ndarray]:
    """sum over |w| = m of R^w_{s,t} phi for m = 0..max_level (m = 0 is P_{t-s} phi)."""
    backend = _check_backend(backend)
    _check_level(max_level)
    a, b = _span(path, s, t)
    h = backend.model.sensor_values(backend.x)
    step = _forward_step(backend, path.dt)
    return _backward_levels(step, h, path.dY[a:b], backend.sample(phi), max_level)


def _summarise(
    backend: GridBackend, functions: list[np.ndarray], x0: Sequence[float] | None
) -> tuple[list[float], list[float]]:
    if x0 is None:
        levels = [float(np.sum(f) * backend.grid.cell_volume) for f in functions]
    else:
        levels = [float(backend.interpolate(f, np.asarray(x0))[0]) for f in functions]
    return levels, [float(v) for v in np.cumsum(levels)]


def truncated_expansion(
    backend: GridBackend,
    path: PathGrid,
    x0: Sequence[float],
    phi: TestFunction,
    max_level: int,
    s: float = 0.0,
    t: float | None = None,
    per_word: bool = False,
) -> ExpansionResult:
    """P_{t-s} phi(x0) + sum_{m <= max_level} sum_{|w| = m} R^w_{s,t} phi(x0)."""
    t = path.T if t is None else t
    functions = level_functions(backend, path, s, t, phi, max_level)
    levels, partial_sums = _summarise(backend, functions, x0)
    terms: list[LevelTerm] = []
    if per_word and max_level:
        a, b = _span(path, s, t)
        h = backend.model.sensor_values(backend.x)
        step = _forward_step(backend, path.dt)
        targets = [w for m in range(1, max_level + 1) for w in words(path.d2, m)]
        values = _backward_suffixes(step, h, path.dY[a:b], backend.sample(phi), targets)
        point = np.asarray(x0)
        terms = [
            LevelTerm(len(w), w, float(backend.interpolate(values[w], point)[0])) for w in targets
        ]
    logger.debug(f"Expansion levels at x0: {[f'{v:.3g}' for v in levels]}")
    return ExpansionResult(levels, partial_sums, terms, functions)


def adjoint_truncated_expansion(
    backend: GridBackend,
    path: PathGrid,
    g: TestFunction,
    max_level: int,
    s: float = 0.0,
    t: float | None = None,
    form: AdjointForm = AdjointForm.TRANSPOSE,
    x0: Sequence[float] | None = None,
) -> ExpansionResult:
    """Adjoint series P*_{t-s} g + sum P*_{t-t_m} H_{i_m} ... H_{i_1} P*_{t_1-s} g dY...

    Composition order is reversed with respect to the forward series. Level
    summaries are point values at x0 when given, otherwise total masses.
    """
    backend = _check_backend(backend)
    _check_level(max_level)
    t = path.T if t is None else t
    a, b = _span(path, s, t)
    h = backend.model.sensor_values(backend.x)
    if form == AdjointForm.TRANSPOSE:
        operator = backend.operator()

        def step(V: np.ndarray) -> np.ndarray:
            return operator.apply_transpose(path.dt, V)

    else:
        model, potential = adjoint_model(backend.model)
        adjoint = GridBackend(
            model, backend.grid, backend.method, backend.dense_limit, backend.cn_substep
        )
        step = _forward_step(adjoint, path.dt, potential)
    functions = _forward_levels(step, h, path.dY[a:b], backend.sample(g), max_level)
    levels, partial_sums = _summarise(backend, functions, x0)
    return ExpansionResult(levels, partial_sums, [], functions)


def expansion_duality_gaps(
    backend: GridBackend, path: PathGrid, phi: TestFunction, g: TestFunction, max_level: int
) -> list[float]:
    """|<level_m phi, g> - <phi, adjoint level_m g>| for m = 0..max_level (transpose form)."""
    forward = level_functions(backend, path, 0.0, path.T, phi, max_level)
    adjoint = adjoint_truncated_expansion(backend, path, g, max_level).level_functions
    f, gv = backend.sample(phi), backend.sample(g)
    return [
        abs(backend.inner(fm, gv) - backend.inner(f, gm))
        for fm, gm in zip(forward, adjoint, strict=True)
    ]


def remainder_bound(h_sup: float, t: float, k: int, phi_sup: float) -> float:
    """e^{t |h|} |h|^{2(k+1)} / (k+1)! |phi|^2, a bound on the mean square tail after level k."""
    if h_sup < 0 or phi_sup < 0 or k < 0:
        raise InvalidIndexError("remainder_bound needs nonnegative norms and level")
    return math.exp(t * h_sup) * h_sup ** (2 * (k + 1)) / math.factorial(k + 1) * phi_sup**2


def simplex_volume_constant(k: int, c: float) -> float:
    """a_k = 4 (2 sqrt(pi))^k c / (k Gamma(k / 2))."""
    if k < 1 or c <= 0:
        raise InvalidIndexError(f"need k >= 1 and c > 0, got k={k}, c={c}")
    return float(4.0 * (2.0 * math.sqrt(math.pi)) ** k * c / (k * gamma(k / 2.0)))


# --- Operator-valued levels ---
def chaos_level_series(
    backend: GridBackend, path: PathGrid, s: float, t: float, depth: int
) -> LevelSeries:
    """R_{s,t} as a LevelSeries whose word coefficients are grid matrices."""
    backend = _check_backend(backend)
    _check_level(depth)
    a, b = _span(path, s, t)
    h = backend.model.sensor_values(backend.x)
    step = _forward_step(backend, path.dt)
    n, d = backend.grid.size, path.d2
    targets = [w for m in range(depth + 1) for w in words(d, m)]
    values = _backward_suffixes(step, h, path.dY[a:b], np.eye(n), targets)
    levels = []
    for m in range(depth + 1):
        level = np.zeros((d,) * m + (n, n))
        for w in words(d, m):
            level[tuple(i - 1 for i in w)] = values[w]
        levels.append(level)
    return LevelSeries(tuple(levels), d, (n, n))


def chaos_chen_check(
    backend: GridBackend, path: PathGrid, s: float, u: float, t: float, depth: int
) -> float:
    """max_m |R^m_{s,t} - sum R_{s,u} R_{u,t}| relative to the largest coefficient."""
    whole = chaos_level_series(backend, path, s, t, depth)
    split = chaos_level_series(backend, path, s, u, depth) * chaos_level_series(
        backend, path, u, t, depth
    )
    return (whole - split).norm() / max(whole.norm(), 1.0)


# --- Operator norms ---
def norm_dictionary(backend: GridBackend, version: int = DICTIONARY_VERSION) -> np.ndarray:
    """Test functions on the grid, shape (size, 32): 16 Gaussian bumps and 16 plane waves."""
    if version != 1:
        raise UnsupportedError(f"unknown dictionary version {version}")
    if backend.grid.dim != 1:
        raise UnsupportedError("the operator-norm dictionary is one-dimensional")
    x = backend.grid.axis
    half = DICTIONARY_SIZE // 2
    centres = np.linspace(-0.5, 0.5, half) * backend.grid.half_width
    bumps = [np.exp(-0.5 * ((x - c) / 0.5) ** 2) for c in centres]
    frequencies = np.linspace(0.5, 4.0, half // 2)
    waves = [np.cos(w * x) for w in frequencies] + [np.sin(w * x) for w in frequencies]
    return np.stack(bumps + waves, axis=-1)


def operator_norm_decay(
    backend: GridBackend,
    path: PathGrid,
    level: int,
    gamma_: float,
    version: int = DICTIONARY_VERSION,
    min_steps: int = MIN_DYADIC_STEPS,
) -> NormDecayReport:
    """Slope of log sup_phi |R^m_{s,s+l} phi|_H1 / |phi|_H1 against log l over dyadic l.

    At each scale the norm is the largest over the disjoint dyadic intervals
    [i l, (i+1) l] covering the path.
    """
    backend = _check_backend(backend)
    if level < 1 or level > MAX_NORM_DECAY_LEVEL:
        raise InvalidIndexError(f"norm decay is fitted for levels 1..{MAX_NORM_DECAY_LEVEL}")
    model = backend.model
    dictionary = norm_dictionary(backend, version)
    base_norms = [h1_norm(backend, model, dictionary[:, j]) for j in range(DICTIONARY_SIZE)]
    h = model.sensor_values(backend.x)
    step = _forward_step(backend, path.dt)
    lengths, norms = [], []
    steps = path.M
    while steps >= min_steps:
        largest = 0.0
        for start in range(0, path.M - steps + 1, steps):
            window = path.dY[start : start + steps]
            images = _backward_levels(step, h, window, dictionary, level)[level]
            ratios = [
                h1_norm(backend, model, images[:, j]) / base_norms[j]
                for j in range(DICTIONARY_SIZE)
            ]
            largest = max(largest, *ratios)
        lengths.append(steps * path.dt)
        norms.append(float(largest))
        steps //= 2
    if max(norms, default=0.0) <= VACUOUS_NORM:
        return NormDecayReport(level, gamma_, lengths, norms, None, True, True)
    usable = [(ell, n) for ell, n in zip(lengths, norms, strict=True) if n > VACUOUS_NORM]
    if len(usable) < 4:
        raise DegenerateFitError(f"only {len(usable)} interval scales with nonzero norms")
    log_l, log_n = np.log(np.array(usable)).T
    slope = float(np.polyfit(log_l, log_n, 1)[0])
    passed = slope >= level * gamma_ - 0.1
    logger.info(f"Norm decay at level {level}: slope {slope:.3f}, target {level * gamma_:.2f}")
    return NormDecayReport(level, gamma_, lengths, norms, slope, passed, False)
