"""Iterated Ito integrals of an observation path and their algebra.

q^w_{s,t} for a word w = (i_1, ..., i_m) over channels 1..d is the nested
left-point sum over grid indices s <= k_1 < ... < k_m < t of
dY^{i_1}_{k_1} ... dY^{i_m}_{k_m}. On one shared grid these sums satisfy
Chen's identity exactly, which is what the checks here rely on.

Truncated series are kept as lists of level tensors: level j has shape
(d,)*j followed by the coefficient shape (() for reals, (n, n) for grid
operators).
"""

import heapq
import itertools
import logging
import math
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gamma, zeta

from src.constants import (
    EXTENSION_TOLERANCE,
    LOGGER_NAME,
    MAX_REFINEMENT_DEPTH,
    MIN_DYADIC_STEPS,
    ExtensionSchedule,
)
from src.errors import (
    DimensionMismatchError,
    InvalidIndexError,
    NonConvergenceError,
    OffGridTimeError,
    SeriesDivergenceError,
)
from src.sde_core import PathGrid

logger = logging.getLogger(LOGGER_NAME)

type Word = tuple[int, ...]


def factorial(x: float | np.ndarray) -> float | np.ndarray:
    """x! = Gamma(x + 1) for fractional x."""
    return gamma(np.asarray(x, dtype=float) + 1.0)


def words(channels: int, length: int) -> list[Word]:
    return list(itertools.product(range(1, channels + 1), repeat=length))


def _check_word(word: Sequence[int], channels: int) -> Word:
    word = tuple(int(i) for i in word)
    if any(i < 1 or i > channels for i in word):
        raise InvalidIndexError(f"word {word} uses channels outside 1..{channels}")
    return word


def _span(path: PathGrid, s: float, t: float) -> tuple[int, int]:
    a, b = path.index_of(s), path.index_of(t)
    if a > b:
        raise OffGridTimeError(f"need s <= t, got s={s}, t={t}")
    return a, b


# --- Level series ---
@dataclass(frozen=True, eq=False)
class LevelSeries:
    """Truncated tensor series sum_j sum_{|w|=j} c_w e_w."""

    levels: tuple[np.ndarray, ...]
    channels: int
    coefficient_shape: tuple[int, ...] = ()

    @property
    def depth(self) -> int:
        return len(self.levels) - 1

    @classmethod
    def unit(cls, channels: int, depth: int, coefficient_shape: tuple[int, ...] = ()):
        one = np.eye(coefficient_shape[0]) if coefficient_shape else np.array(1.0)
        levels = [one] + [
            np.zeros((channels,) * j + coefficient_shape) for j in range(1, depth + 1)
        ]
        return cls(tuple(levels), channels, coefficient_shape)

    def coefficient(self, word: Sequence[int]) -> np.ndarray | float:
        word = _check_word(word, self.channels)
        value = self.levels[len(word)][tuple(i - 1 for i in word)]
        return value if self.coefficient_shape else float(value)

    def projection(self, j: int) -> np.ndarray:
        return self.levels[j]

    def truncated(self, depth: int) -> "LevelSeries":
        return LevelSeries(self.levels[: depth + 1], self.channels, self.coefficient_shape)

    def padded(self, depth: int) -> "LevelSeries":
        extra = [
            np.zeros((self.channels,) * j + self.coefficient_shape)
            for j in range(self.depth + 1, depth + 1)
        ]
        return LevelSeries((*self.levels, *extra), self.channels, self.coefficient_shape)

    def _level_product(self, a: np.ndarray, i: int, b: np.ndarray, j: int) -> np.ndarray:
        if not self.coefficient_shape:
            return np.multiply.outer(a, b)
        p, q = self.coefficient_shape
        d = self.channels
        prod = np.einsum("apq,bqr->abpr", a.reshape(d**i, p, q), b.reshape(d**j, q, q))
        return prod.reshape((d,) * (i + j) + (p, q))

    def __mul__(self, other: "LevelSeries") -> "LevelSeries":
        if self.channels != other.channels or self.coefficient_shape != other.coefficient_shape:
            raise DimensionMismatchError("series over different alphabets or algebras")
        depth = min(self.depth, other.depth)
        levels = []
        for n in range(depth + 1):
            total = sum(
                self._level_product(self.levels[i], i, other.levels[n - i], n - i)
                for i in range(n + 1)
            )
            levels.append(np.asarray(total))
        return LevelSeries(tuple(levels), self.channels, self.coefficient_shape)

    def __sub__(self, other: "LevelSeries") -> "LevelSeries":
        depth = min(self.depth, other.depth)
        levels = tuple(self.levels[j] - other.levels[j] for j in range(depth + 1))
        return LevelSeries(levels, self.channels, self.coefficient_shape)

    def level_norm(self, j: int) -> float:
        level = self.levels[j]
        return float(np.max(np.abs(level))) if level.size else 0.0

    def norm(self) -> float:
        """Sup over word coefficients (max-abs entry for operator coefficients)."""
        return max(self.level_norm(j) for j in range(self.depth + 1))


# --- Iterated sums ---
def iterated_ito(path: PathGrid, word: Sequence[int], s: float, t: float) -> float:
    """q^w_{s,t}; q^() = 1."""
    word = _check_word(word, path.d2)
    a, b = _span(path, s, t)
    dY = path.dY[a:b]
    q = np.ones(b - a + 1)
    for letter in word:
        q = np.concatenate([[0.0], np.cumsum(q[:-1] * dY[:, letter - 1])])
    return float(q[-1])


def signature_stream(dY: np.ndarray, depth: int) -> list[np.ndarray]:
    """Levels of q_{0,k} for every k, level j of shape (K+1,) + (d,)*j."""
    K, d = dY.shape
    stream = [np.ones(K + 1)]
    for j in range(1, depth + 1):
        previous = stream[-1][:-1]
        increments = np.einsum("k...,ki->k...i", previous, dY)
        level = np.concatenate([np.zeros((1,) + (d,) * j), np.cumsum(increments, axis=0)])
        stream.append(level)
    return stream


def _signature_by_index(path: PathGrid, a: int, b: int, depth: int) -> LevelSeries:
    stream = signature_stream(path.dY[a:b], depth)
    return LevelSeries(tuple(np.asarray(level[-1]) for level in stream), path.d2)


def signature_levels(path: PathGrid, s: float, t: float, depth: int) -> LevelSeries:
    """All q^w_{s,t} with |w| <= depth as a LevelSeries."""
    a, b = _span(path, s, t)
    return _signature_by_index(path, a, b, depth)


@dataclass
class IteratedIntegralTable:
    """q^w_{s,t} for every word up to `depth` at the queried (s, t) pairs."""

    path: PathGrid
    depth: int
    series: dict[tuple[float, float], LevelSeries] = field(default_factory=dict)

    @classmethod
    def build(
        cls, path: PathGrid, pairs: Iterable[tuple[float, float]], depth: int
    ) -> "IteratedIntegralTable":
        table = cls(path, depth)
        for s, t in pairs:
            table.series[(s, t)] = signature_levels(path, s, t, depth)
        return table

    def value(self, word: Sequence[int], s: float, t: float) -> float:
        return float(self.series[(s, t)].coefficient(word))

    def rows(self) -> list[tuple[str, float, float, float]]:
        out = []
        for (s, t), series in self.series.items():
            for j in range(1, self.depth + 1):
                for w in words(self.path.d2, j):
                    out.append(("".join(map(str, w)), s, t, float(series.coefficient(w))))
        return out


# --- Identities ---
def chen_check(path: PathGrid, k: int, s: float, u: float, t: float) -> float:
    """max_w |q^w_{s,t} - sum_{w = m * l} q^m_{s,u} q^l_{u,t}| over |w| <= k."""
    if not path.index_of(s) <= path.index_of(u) <= path.index_of(t):
        raise OffGridTimeError(f"need s <= u <= t, got {s}, {u}, {t}")
    whole = signature_levels(path, s, t, k)
    split = signature_levels(path, s, u, k) * signature_levels(path, u, t, k)
    return (whole - split).norm()


def shuffle_check(path: PathGrid, i: int, j: int, s: float, t: float) -> float:
    """|q^i q^j - q^(i,j) - q^(j,i) - sum dY^i dY^j| for two channels."""
    a, b = _span(path, s, t)
    dY = path.dY[a:b]
    covariation = float(np.sum(dY[:, i - 1] * dY[:, j - 1]))
    lhs = iterated_ito(path, (i,), s, t) * iterated_ito(path, (j,), s, t)
    rhs = iterated_ito(path, (i, j), s, t) + iterated_ito(path, (j, i), s, t) + covariation
    return abs(lhs - rhs)


def neoclassical_check(q: float, n: int, s: float, t: float) -> tuple[float, float, bool]:
    """(1/q^2) sum_i s^{i/q} t^{(n-i)/q} / ((i/q)! ((n-i)/q)!) <= (s+t)^{n/q} / (n/q)!."""
    if q < 1 or n < 0 or s < 0 or t < 0:
        raise InvalidIndexError(f"need q >= 1, n >= 0, s, t >= 0; got {q}, {n}, {s}, {t}")
    i = np.arange(n + 1)
    terms = s ** (i / q) * t ** ((n - i) / q) / (factorial(i / q) * factorial((n - i) / q))
    lhs = float(np.sum(terms) / q**2)
    rhs = float((s + t) ** (n / q) / factorial(n / q))
    return lhs, rhs, lhs <= rhs + 1e-12 * max(rhs, 1.0)


def theta_constant(q: float) -> float:
    """q^2 + sum_{r>=3} (2/(r-2))^e = q^2 + 2^e zeta(e), e = (floor(q) + 1) / q."""
    if q <= 0:
        raise SeriesDivergenceError(f"theta needs q > 0, got {q}")
    exponent = (math.floor(q) + 1) / q
    if exponent <= 1:
        raise SeriesDivergenceError(f"tail exponent {exponent} <= 1, the series diverges")
    return float(q**2 + 2**exponent * zeta(exponent))


# --- Hoelder control ---
def dyadic_pairs(path: PathGrid, min_steps: int = MIN_DYADIC_STEPS) -> list[tuple[int, int]]:
    """Index pairs [i L, (i + 1) L] for L = min_steps * 2^j <= M."""
    pairs = []
    length = min_steps
    while length <= path.M:
        pairs.extend((i * length, (i + 1) * length) for i in range(path.M // length))
        length *= 2
    return pairs


def holder_bound(c: float, length: float, level: int, gamma_: float, theta: float) -> float:
    """(c |t - s|)^{k gamma} / (theta (k gamma)!)."""
    exponent = level * gamma_
    return float((c * length) ** exponent / (theta * factorial(exponent)))


@dataclass
class HolderFit:
    c_hat: float
    gamma: float
    theta: float
    k_max: int
    certified: bool


def holder_constant_fit(path: PathGrid, gamma_: float, k_max: int) -> HolderFit:
    """Smallest c with |q^w_{s,t}| <= (c|t-s|)^{|w| gamma} / (theta (|w| gamma)!).

    The bound is fitted over all dyadic pairs at scales of at least four steps.
    """
    if not 0 < gamma_ < 1:
        raise InvalidIndexError(f"Hoelder exponent must lie in (0, 1), got {gamma_}")
    theta = theta_constant(1.0 / gamma_)
    pairs = dyadic_pairs(path)
    c_hat = 0.0
    sup_by_pair = []
    for a, b in pairs:
        series = _signature_by_index(path, a, b, k_max)
        length = (b - a) * path.dt
        sups = [series.level_norm(k) for k in range(1, k_max + 1)]
        sup_by_pair.append((length, sups))
        for k, sup in enumerate(sups, start=1):
            exponent = k * gamma_
            needed = (sup * theta * factorial(exponent)) ** (1.0 / exponent) / length
            c_hat = max(c_hat, float(needed))
    slack = c_hat * (1.0 + 1e-12)
    certified = all(
        sup <= holder_bound(slack, length, k, gamma_, theta) * (1 + 1e-12) + 1e-300
        for length, sups in sup_by_pair
        for k, sup in enumerate(sups, start=1)
    )
    logger.debug(f"Hoelder fit: c={c_hat:.4g}, theta={theta:.4g}, {len(pairs)} dyadic pairs")
    return HolderFit(c_hat=c_hat, gamma=gamma_, theta=theta, k_max=k_max, certified=certified)


# --- Extension ---
def _dyadic_partitions(a: int, b: int) -> list[list[int]]:
    """Coarse to fine: {a, b}, then bisection of every interval longer than one step."""
    partitions = [[a, b]]
    while any(hi - lo > 1 for lo, hi in itertools.pairwise(partitions[-1])):
        current = partitions[-1]
        refined = [current[0]]
        for lo, hi in itertools.pairwise(current):
            if hi - lo > 1:
                refined.append((lo + hi) // 2)
            refined.append(hi)
        partitions.append(refined)
    return partitions


def _coarsening_partitions(a: int, b: int) -> list[list[int]]:
    """Greedy removal of the interior point with the smallest t_{j+1} - t_{j-1}.

    Ties go to the lowest index. Snapshots are taken whenever the number of
    points has halved and are returned coarse to fine.
    """
    points = list(range(a, b + 1))
    if len(points) <= 2:
        return [points]
    prev = {p: p - 1 for p in points}
    nxt = {p: p + 1 for p in points}
    alive = set(points)
    heap = [(nxt[p] - prev[p], p) for p in points[1:-1]]
    heapq.heapify(heap)
    snapshots = [points]
    target = len(points) // 2
    while len(alive) > 2:
        gap, p = heapq.heappop(heap)
        if p not in alive or gap != nxt[p] - prev[p]:
            continue
        alive.remove(p)
        left, right = prev[p], nxt[p]
        nxt[left], prev[right] = right, left
        for q in (left, right):
            if q in alive and q not in (a, b):
                heapq.heappush(heap, (nxt[q] - prev[q], q))
        if len(alive) <= max(target, 2):
            snapshots.append(sorted(alive))
            target = len(alive) // 2
    return snapshots[::-1]


SCHEDULES: dict[ExtensionSchedule, Callable[[int, int], list[list[int]]]] = {
    ExtensionSchedule.DYADIC: _dyadic_partitions,
    ExtensionSchedule.COARSENING: _coarsening_partitions,
}


@dataclass
class ExtensionResult:
    series: LevelSeries
    refinements: int
    differences: list[float]
    holder_ok: bool | None = None


def partition_product(
    base: Callable[[int, int], LevelSeries], partition: Sequence[int], depth: int
) -> LevelSeries:
    """prod over consecutive points of the base levels, padded with zeros to `depth`."""
    product: LevelSeries | None = None
    for lo, hi in itertools.pairwise(partition):
        piece = base(lo, hi).padded(depth)
        product = piece if product is None else product * piece
    if product is None:
        raise DimensionMismatchError("a partition needs at least two points")
    return product


def extend_multiplicative(
    path: PathGrid,
    known_depth: int,
    depth: int,
    s: float,
    t: float,
    schedule: ExtensionSchedule = ExtensionSchedule.DYADIC,
    tolerance: float = EXTENSION_TOLERANCE,
    max_depth: int = MAX_REFINEMENT_DEPTH,
    holder: HolderFit | None = None,
) -> ExtensionResult:
    """Levels up to `depth` from the first `known_depth` levels by partition products.

    Partitions are refined along the schedule until two successive products
    agree to `tolerance` in the word-sup norm; the grid partition itself is
    the finest one available.
    """
    a, b = _span(path, s, t)
    if a == b:
        return ExtensionResult(LevelSeries.unit(path.d2, depth), 0, [])

    def base(lo: int, hi: int) -> LevelSeries:
        return _signature_by_index(path, lo, hi, known_depth)

    partitions = SCHEDULES[schedule](a, b)
    schedule_length = len(partitions)
    partitions = partitions[: max_depth + 1]
    previous = partition_product(base, partitions[0], depth)
    differences: list[float] = []
    for partition in partitions[1:]:
        current = partition_product(base, partition, depth)
        differences.append((current - previous).norm())
        previous = current
        if differences[-1] < tolerance:
            break
    # the grid partition cannot be refined further, so reaching it is convergence
    finest = len(differences) == schedule_length - 1
    if not finest and not (differences and differences[-1] < tolerance):
        raise NonConvergenceError(
            f"extension did not settle within {max_depth} refinements "
            f"(last difference {differences[-1]:.3g})"
        )
    holder_ok = None
    if holder is not None:
        length = (b - a) * path.dt
        holder_ok = all(
            previous.level_norm(k)
            <= holder_bound(holder.c_hat, length, k, holder.gamma, holder.theta) * (1 + 1e-9)
            for k in range(known_depth + 1, depth + 1)
        )
    logger.debug(f"Extension ({schedule}) to level {depth}: {len(differences)} refinements")
    return ExtensionResult(previous, len(differences), differences, holder_ok)
