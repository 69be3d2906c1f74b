"""Pathwise form of the first three expansion levels.

Integrating by parts against Y turns every stochastic integral into a
Riemann integral whose integrand depends continuously on the path. A term
reads
    sign * q^{(k)}_{s,t} * int_{s<r_1<...<r_j<t} prod_i C_i(r_i)
        P_{r_1-s} G_1 P_{r_2-r_1} ... G_j P_{t-r_j} Phi_n phi dr
where q^{(c)}_{s,r} is the c-fold iterated Ito integral of the observation,
C_i a product of such integrals evaluated at r_i and G_i = Psi_a Phi_b.
One integration by parts maps a level-m term to at most three level-(m+1)
terms (boundary, interior and diagonal); see `integrate_by_parts`.

On a grid path the q's are taken as right-continuous step functions that
jump at t_k by the increment over (t_k, t_{k+1}). The identity then holds
exactly for the left-point sums of `r_operator_grid`, so the only gap left
is the trapezoid error of the operator parts on each step.
"""

import json
import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, replace
from functools import cache
from typing import Any

import numpy as np

from src.chaos_expansion import r_operator_grid
from src.constants import (
    IBP_TERMS_FIXTURE,
    LOGGER_NAME,
    MAX_IBP_LEVEL,
    ROBUSTNESS_EPSILONS,
    VACUOUS_NORM,
    PsiForm,
)
from src.data_models import ConvergenceReport, RobustnessReport
from src.errors import DimensionMismatchError, InvalidIndexError, UnsupportedError
from src.iterated_integrals import signature_stream
from src.report_utils import resource_path
from src.sde_core import PathGrid
from src.semigroup import GridBackend, TestFunction
from src.ufg_algebra import ScalarField

logger = logging.getLogger(LOGGER_NAME)

MIN_CONVERGENCE_SLOPE = 0.9
MAX_LIPSCHITZ_SPREAD = 2.0


@dataclass(frozen=True)
class ChainNode:
    """One inner integration variable: coefficient orders and the operator Psi_psi Phi_phi."""

    coefficient: tuple[int, ...]
    psi: int
    phi: int = 0

    @property
    def degree(self) -> int:
        return sum(self.coefficient)

    @property
    def label(self) -> str:
        coefficient = "".join(f"q{c}" for c in self.coefficient)
        operator = f"Psi{self.psi}" + (f"Phi{self.phi}" if self.phi else "")
        return f"[{coefficient} {operator}]"


@dataclass(frozen=True)
class PathwiseTerm:
    level: int
    sign: int
    outer: int
    nodes: tuple[ChainNode, ...] = ()
    final: int = 0

    @property
    def degree(self) -> int:
        return self.outer + sum(node.degree for node in self.nodes)

    @property
    def label(self) -> str:
        parts = ["+" if self.sign > 0 else "-"]
        if self.outer:
            parts.append(f"q{self.outer}")
        parts.append("P")
        for node in self.nodes:
            parts += [node.label, "P"]
        if self.final:
            parts.append(f"Phi{self.final}")
        return " ".join(parts)

    def to_json(self) -> dict[str, Any]:
        return {
            "sign": self.sign,
            "outer": self.outer,
            "nodes": [
                {"coefficient": list(n.coefficient), "psi": n.psi, "phi": n.phi}
                for n in self.nodes
            ],
            "final": self.final,
        }

    @classmethod
    def from_json(cls, level: int, data: dict[str, Any]) -> "PathwiseTerm":
        nodes = tuple(
            ChainNode(tuple(n["coefficient"]), int(n["psi"]), int(n.get("phi", 0)))
            for n in data.get("nodes", [])
        )
        return cls(level, int(data["sign"]), int(data["outer"]), nodes, int(data.get("final", 0)))


# --- Term bookkeeping ---
def integrate_by_parts(term: PathwiseTerm) -> list[PathwiseTerm]:
    """Terms of level m+1 obtained by composing `term` with H P and integrating by parts.

    The outer coefficient q^{(k)} absorbs dY into q^{(k+1)}. The boundary piece
    keeps the sign; differentiating the chain in its upper limit gives the
    interior piece (a new node Psi_{n+1}) and, when the chain is not empty,
    the diagonal piece where the last node collides with the upper limit.
    """
    k, n, level = term.outer, term.final, term.level + 1
    out = [replace(term, level=level, outer=k + 1, final=n + 1)]
    interior = ChainNode((k + 1,), n + 1)
    out.append(PathwiseTerm(level, -term.sign, 0, term.nodes + (interior,)))
    if term.nodes:
        last = term.nodes[-1]
        merged = ChainNode(last.coefficient + (k + 1,), last.psi, last.phi + n + 1)
        out.append(PathwiseTerm(level, -term.sign, 0, term.nodes[:-1] + (merged,)))
    return out


@cache
def ibp_terms(level: int) -> tuple[PathwiseTerm, ...]:
    if level < 0 or level > MAX_IBP_LEVEL:
        raise InvalidIndexError(f"pathwise level {level} outside 0..{MAX_IBP_LEVEL}")
    if level == 0:
        return (PathwiseTerm(0, 1, 0),)
    return tuple(new for term in ibp_terms(level - 1) for new in integrate_by_parts(term))


def degree_audit(terms: Sequence[PathwiseTerm]) -> bool:
    """Every term of level m carries iterated integrals of total order m."""
    failures = [t for t in terms if t.degree != t.level]
    for t in failures:
        logger.warning(f"Degree audit failed for level {t.level} term {t.label}")
    return not failures


def load_term_fixture(path: str = IBP_TERMS_FIXTURE) -> dict[int, list[PathwiseTerm]]:
    with open(resource_path(path), encoding="utf8") as f:
        data = json.load(f)
    return {
        int(level): [PathwiseTerm.from_json(int(level), t) for t in terms]
        for level, terms in data["levels"].items()
    }


def fixture_matches(path: str = IBP_TERMS_FIXTURE) -> bool:
    fixture = load_term_fixture(path)
    return all(list(ibp_terms(level)) == terms for level, terms in fixture.items())


# --- Operators ---
def _sensor_product(sensors: Sequence[ScalarField]) -> ScalarField:
    """h_{i_1} ... h_{i_k} with product-rule gradient and Hessian."""
    dim = sensors[0].dim

    def value(x: np.ndarray) -> np.ndarray:
        return math.prod((h.value(x) for h in sensors), start=np.ones(x.shape[:-1]))

    def others(x: np.ndarray, skip: set[int]) -> np.ndarray:
        parts = (h.value(x) for j, h in enumerate(sensors) if j not in skip)
        return math.prod(parts, start=np.ones(x.shape[:-1]))

    def gradient(x: np.ndarray) -> np.ndarray:
        total = np.zeros(x.shape)
        for j, h in enumerate(sensors):
            total += h.gradient(x) * others(x, {j})[..., None]
        return total

    def hessian(x: np.ndarray) -> np.ndarray:
        total = np.zeros((*x.shape, dim))
        for j, h in enumerate(sensors):
            total += h.hessian(x) * others(x, {j})[..., None, None]
            for m, g in enumerate(sensors):
                if m != j:
                    outer = h.gradient(x)[..., :, None] * g.gradient(x)[..., None, :]
                    total += outer * others(x, {j, m})[..., None, None]
        return total

    name = "*".join(h.name for h in sensors) or "1"
    return ScalarField(dim, value, gradient, hessian, name=name)


@dataclass
class _Psi:
    """Psi and Phi for words over one backend, with per-word multipliers cached."""

    backend: GridBackend
    form: PsiForm = PsiForm.COMMUTATOR
    _cache: dict[tuple[int, ...], tuple[np.ndarray, np.ndarray, np.ndarray]] = field(
        default_factory=dict
    )

    def _check(self, word: tuple[int, ...]) -> None:
        d2 = self.backend.model.d2
        if any(i < 1 or i > d2 for i in word):
            raise InvalidIndexError(f"word {word} uses channels outside 1..{d2}")

    def multipliers(self, word: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """h_word on the grid, A(h_word) and V_i(h_word) stacked as (d1, size)."""
        if word not in self._cache:
            self._check(word)
            model, x = self.backend.model, self.backend.x
            product = _sensor_product([model.sensors[i - 1] for i in word])
            values = np.asarray(product.value(x), dtype=float)
            if self.form == PsiForm.FORMULA:
                grad = product.gradient(x)
                drift = model.generator_apply(product, x)
                directional = np.stack(
                    [np.sum(V.value(x) * grad, axis=-1) for V in model.diffusions]
                )
            else:
                drift = directional = np.zeros(0)
            self._cache[word] = (values, drift, directional)
        return self._cache[word]

    def phi(self, word: tuple[int, ...], f: np.ndarray) -> np.ndarray:
        return self.multipliers(word)[0] * f if word else f

    def psi(self, word: tuple[int, ...], f: np.ndarray) -> np.ndarray:
        if not word:
            return np.zeros_like(f)
        values, drift, directional = self.multipliers(word)
        if self.form == PsiForm.COMMUTATOR:
            A = self.backend.apply_generator
            return A(values * f) - values * A(f)
        out = drift * f
        for d, V in zip(directional, self.backend.model.diffusions, strict=True):
            out = out + d * self.backend.first_order(V, f)
        return out


def psi_operator(
    backend: GridBackend,
    word: Sequence[int],
    phi: TestFunction,
    form: PsiForm = PsiForm.COMMUTATOR,
) -> np.ndarray:
    """Psi_word phi = A(Phi_word phi) - Phi_word(A phi) on the grid."""
    return _Psi(backend, form).psi(tuple(int(i) for i in word), backend.sample(phi))


def phi_operator(backend: GridBackend, word: Sequence[int], phi: TestFunction) -> np.ndarray:
    return _Psi(backend).phi(tuple(int(i) for i in word), backend.sample(phi))


# --- Evaluation ---
@dataclass
class _Chain:
    operators: _Psi
    step: Callable[[np.ndarray], np.ndarray]
    q: list[np.ndarray]
    dt: float
    channel: int

    def word(self, n: int) -> tuple[int, ...]:
        return (self.channel,) * n

    def coefficient(self, node: ChainNode, k: int) -> float:
        return math.prod(float(self.q[c][k]) for c in node.coefficient)

    def gamma(self, node: ChainNode, f: np.ndarray) -> np.ndarray:
        return self.operators.psi(self.word(node.psi), self.operators.phi(self.word(node.phi), f))


def _evaluate_term(term: PathwiseTerm, chain: _Chain, phi: np.ndarray) -> np.ndarray:
    """Backward sweep over the steps (t_k, t_{k+1}).

    On a step every coefficient is constant, equal to its value at index k+1,
    and only the operator part is integrated by the trapezoid rule:
        U_j(k) = P U_j(k+1) + dt/2 C_j[k+1] (Gamma_j(k) + P Gamma_j(k+1)),
        Gamma_j(k) = G_j U_{j+1}(k),  U_{J+1}(k) = P_{t-t_k} Phi_n phi.
    """
    K = len(chain.q[0]) - 1
    J = len(term.nodes)
    V = chain.operators.phi(chain.word(term.final), phi)
    U = np.zeros((J, V.size))
    Gamma = np.zeros((J, V.size))

    def refresh(propagated: np.ndarray | None = None, k: int = 0) -> None:
        inner = V
        for j in reversed(range(J)):
            node = term.nodes[j]
            Gamma[j] = chain.gamma(node, inner)
            if propagated is not None:
                weight = 0.5 * chain.dt * chain.coefficient(node, k + 1)
                U[j] = propagated[:, 1 + j] + weight * (Gamma[j] + propagated[:, 1 + J + j])
            inner = U[j]

    refresh()
    for k in reversed(range(K)):
        stacked = chain.step(np.column_stack([V, *U, *Gamma]))
        V = stacked[:, 0]
        refresh(stacked, k)
    result = U[0] if J else V
    return term.sign * float(chain.q[term.outer][K]) * result


def _chain(
    backend: GridBackend, path: PathGrid, s: float, t: float, form: PsiForm, channel: int
) -> _Chain:
    if not isinstance(backend, GridBackend):
        raise UnsupportedError("the pathwise representation needs the grid backend")
    if backend.model.d2 != path.d2:
        raise DimensionMismatchError(
            f"model has {backend.model.d2} sensors, the path has {path.d2} channels"
        )
    if channel < 1 or channel > path.d2:
        raise InvalidIndexError(f"channel {channel} outside 1..{path.d2}")
    a, b = path.index_of(s), path.index_of(t)
    if a > b:
        raise InvalidIndexError(f"need s <= t, got s={s}, t={t}")
    q = [np.ravel(level) for level in signature_stream(path.dY[a:b, channel - 1 : channel], 3)]
    operator = backend.operator()

    def step(V: np.ndarray) -> np.ndarray:
        return operator.apply(path.dt, V)

    return _Chain(_Psi(backend, form), step, q, path.dt, channel)


def ibp_term_values(
    backend: GridBackend,
    path: PathGrid,
    level: int,
    s: float,
    t: float,
    phi: TestFunction,
    form: PsiForm = PsiForm.COMMUTATOR,
    channel: int = 1,
) -> list[tuple[PathwiseTerm, float, np.ndarray]]:
    """(term, outer coefficient value, grid contribution) for every term of one level."""
    if level >= 2 and path.d2 != 1:
        raise UnsupportedError("pathwise levels 2 and 3 need a single observation channel")
    if level < 1:
        raise InvalidIndexError(f"pathwise level {level} outside 1..{MAX_IBP_LEVEL}")
    chain = _chain(backend, path, s, t, form, channel)
    f = backend.sample(phi)
    return [
        (term, float(chain.q[term.outer][-1]), _evaluate_term(term, chain, f))
        for term in ibp_terms(level)
    ]


def ibp_level(
    backend: GridBackend,
    path: PathGrid,
    level: int,
    s: float,
    t: float,
    phi: TestFunction,
    form: PsiForm = PsiForm.COMMUTATOR,
    channel: int = 1,
) -> np.ndarray:
    values = ibp_term_values(backend, path, level, s, t, phi, form, channel)
    return np.sum([v for _, _, v in values], axis=0)


def ibp_level1(
    backend: GridBackend,
    path: PathGrid,
    s: float,
    t: float,
    phi: TestFunction,
    form: PsiForm = PsiForm.COMMUTATOR,
    channel: int = 1,
) -> np.ndarray:
    """q_{s,t} P_{t-s}(h phi) - int q_{s,r} P_{r-s} Psi_1 P_{t-r} phi dr."""
    return ibp_level(backend, path, 1, s, t, phi, form, channel)


def ibp_level2(
    backend: GridBackend,
    path: PathGrid,
    s: float,
    t: float,
    phi: TestFunction,
    form: PsiForm = PsiForm.COMMUTATOR,
) -> np.ndarray:
    return ibp_level(backend, path, 2, s, t, phi, form)


def ibp_level3(
    backend: GridBackend,
    path: PathGrid,
    s: float,
    t: float,
    phi: TestFunction,
    form: PsiForm = PsiForm.COMMUTATOR,
) -> np.ndarray:
    return ibp_level(backend, path, 3, s, t, phi, form)


# --- Checks ---
def ibp_convergence(
    backend: GridBackend,
    path: PathGrid,
    phi: TestFunction,
    levels: Sequence[int] = (1, 2, 3),
    halvings: int = 3,
) -> list[ConvergenceReport]:
    """Slope of log sup|pathwise - direct| against log dt over `halvings` coarsenings."""
    reports = []
    grids = [path.coarsened(2**j) for j in range(halvings + 1)]
    for level in levels:
        word = (1,) * level
        steps, errors = [], []
        for grid in grids:
            gap = ibp_level(backend, grid, level, 0.0, grid.T, phi) - r_operator_grid(
                backend, grid, word, 0.0, grid.T, phi
            )
            steps.append(grid.dt)
            errors.append(backend.sup_norm(gap))
        if min(errors) <= VACUOUS_NORM:
            slope = math.inf
        else:
            slope = float(np.polyfit(np.log(steps), np.log(errors), 1)[0])
        passed = slope >= MIN_CONVERGENCE_SLOPE
        logger.info(f"Pathwise level {level}: errors {errors}, slope {slope:.3f}")
        reports.append(ConvergenceReport(level, steps, errors, slope, passed))
    return reports


def robustness_check(
    backend: GridBackend,
    path: PathGrid,
    phi: TestFunction,
    levels: Sequence[int] = (1, 2, 3),
    epsilons: Sequence[float] = ROBUSTNESS_EPSILONS,
) -> list[RobustnessReport]:
    """Shift Y by eps * t / T (sup distance eps) and compare shift / eps across eps."""
    reports = []
    ramp = (path.times / path.T)[:, None]
    for level in levels:
        base = ibp_level(backend, path, level, 0.0, path.T, phi)
        shifts = []
        for eps in epsilons:
            moved = path.with_observation(path.Y + eps * ramp)
            shifts.append(
                backend.sup_norm(ibp_level(backend, moved, level, 0.0, path.T, phi) - base)
            )
        ratios = [shift / eps for shift, eps in zip(shifts, epsilons, strict=True)]
        if max(shifts) <= VACUOUS_NORM:
            passed = True
        else:
            finite = all(np.isfinite(ratios)) and min(ratios) > 0
            passed = finite and max(ratios) / min(ratios) <= MAX_LIPSCHITZ_SPREAD
        reports.append(RobustnessReport(level, list(epsilons), shifts, ratios, passed))
    return reports
