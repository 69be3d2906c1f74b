"""Multi-index combinatorics and bracket vector fields.

A multi-index is a word over {0, 1, ..., d1}; letter 0 stands for the drift
field V0 and counts twice in the degree. Bracket fields are built
recursively, V_[alpha * i] = [V_[alpha], V_i], with analytic Jacobians for
single letters and centered finite differences for anything deeper.
"""

import itertools
import logging
from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass, field

import numpy as np

from src.constants import FD_STEP, LOGGER_NAME
from src.errors import InvalidIndexError

logger = logging.getLogger(LOGGER_NAME)

ArrayFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, order=True)
class MultiIndex:
    entries: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if any(int(e) < 0 for e in self.entries):
            raise InvalidIndexError(f"negative letter in multi-index {self.entries}")
        object.__setattr__(self, "entries", tuple(int(e) for e in self.entries))

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[int]:
        return iter(self.entries)

    def __mul__(self, other: "MultiIndex") -> "MultiIndex":
        return concat(self, other)

    def __str__(self) -> str:
        return "(" + ",".join(map(str, self.entries)) + ")" if self.entries else "()"

    @property
    def degree(self) -> int:
        return degree(self)

    @property
    def is_empty(self) -> bool:
        return not self.entries

    def to_json(self) -> list[int]:
        return list(self.entries)

    @classmethod
    def from_json(cls, data: Sequence[int]) -> "MultiIndex":
        return cls(tuple(data))


EMPTY = MultiIndex()


def degree(alpha: MultiIndex) -> int:
    """Length of the word plus one extra unit per zero letter."""
    return len(alpha) + sum(1 for e in alpha if e == 0)


def concat(alpha: MultiIndex, beta: MultiIndex) -> MultiIndex:
    return MultiIndex(alpha.entries + beta.entries)


def enumerate_A1(j: int, d1: int) -> list[MultiIndex]:
    """All words over {0..d1} except the empty word and (0) with degree <= j.

    Returned in shortlex order (by length, then lexicographically), which is
    the iteration order used everywhere downstream.
    """
    if j < 1:
        raise InvalidIndexError(f"A1({j}) is empty: the degree bound must be at least 1")
    if d1 < 1:
        raise InvalidIndexError(f"need at least one driving field, got d1={d1}")
    words: list[MultiIndex] = []
    for length in range(1, j + 1):
        for letters in itertools.product(range(d1 + 1), repeat=length):
            alpha = MultiIndex(letters)
            if letters == (0,) or degree(alpha) > j:
                continue
            words.append(alpha)
    return words


def enumerate_A0(j: int, d1: int) -> list[MultiIndex]:
    """A1(j) together with the empty word (the identity operator)."""
    return [EMPTY, *enumerate_A1(j, d1)]


# --- Fields ---
def _as_points(x: np.ndarray | Sequence[float], dim: int) -> np.ndarray:
    points = np.asarray(x, dtype=float)
    if points.ndim == 0 or points.shape[-1] != dim:
        raise InvalidIndexError(f"points must have trailing dimension {dim}, got {points.shape}")
    return points


def finite_difference_jacobian(value: ArrayFn, x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Centered differences, J[..., i, j] = d value_i / d x_j.

    The step in coordinate j is `step * (|x_j| + 1)`.
    """
    x = np.asarray(x, dtype=float)
    dim = x.shape[-1]
    columns = []
    for j in range(dim):
        h = step * (np.abs(x[..., j]) + 1.0)
        shift = np.zeros_like(x)
        shift[..., j] = h
        diff = (value(x + shift) - value(x - shift)) / (2.0 * h)[..., None]
        columns.append(diff)
    return np.stack(columns, axis=-1)


@dataclass(frozen=True)
class VectorField:
    """Smooth field on R^N evaluated on arrays of points of shape (..., N)."""

    dim: int
    value: ArrayFn
    jacobian: ArrayFn
    name: str = "V"

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.value(_as_points(x, self.dim))

    def jac(self, x: np.ndarray) -> np.ndarray:
        return self.jacobian(_as_points(x, self.dim))

    def divergence(self, x: np.ndarray) -> np.ndarray:
        return np.trace(self.jac(x), axis1=-2, axis2=-1)

    def apply(self, gradient: np.ndarray, x: np.ndarray) -> np.ndarray:
        """V f at x, given the gradient of f at x."""
        return np.einsum("...i,...i->...", self(x), gradient)

    @classmethod
    def from_value(cls, dim: int, value: ArrayFn, name: str = "V", step: float = FD_STEP):
        """Field whose Jacobian is obtained by finite differences of its value."""
        return cls(
            dim=dim,
            value=value,
            jacobian=lambda x: finite_difference_jacobian(value, x, step),
            name=name,
        )

    @classmethod
    def zero(cls, dim: int) -> "VectorField":
        return cls(
            dim=dim,
            value=lambda x: np.zeros_like(x, dtype=float),
            jacobian=lambda x: np.zeros((*x.shape, dim)),
            name="0",
        )


@dataclass(frozen=True)
class ScalarField:
    """Smooth function R^N -> R with gradient and (optionally) Hessian."""

    dim: int
    value: ArrayFn
    gradient: ArrayFn
    hessian_fn: ArrayFn | None = None
    name: str = "f"
    fd_step: float = field(default=FD_STEP, repr=False)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.value(_as_points(x, self.dim))

    def grad(self, x: np.ndarray) -> np.ndarray:
        return self.gradient(_as_points(x, self.dim))

    def hessian(self, x: np.ndarray) -> np.ndarray:
        points = _as_points(x, self.dim)
        if self.hessian_fn is not None:
            return self.hessian_fn(points)
        return finite_difference_jacobian(self.gradient, points, self.fd_step)

    @classmethod
    def constant(cls, dim: int, c: float) -> "ScalarField":
        return cls(
            dim=dim,
            value=lambda x: np.full(x.shape[:-1], float(c)),
            gradient=lambda x: np.zeros_like(x, dtype=float),
            hessian_fn=lambda x: np.zeros((*x.shape, dim)),
            name=f"{c:g}",
        )

    @classmethod
    def from_value(cls, dim: int, value: ArrayFn, name: str = "f", step: float = FD_STEP):
        def gradient(x: np.ndarray) -> np.ndarray:
            return finite_difference_jacobian(lambda y: value(y)[..., None], x, step)[..., 0, :]

        return cls(dim=dim, value=value, gradient=gradient, name=name)


# --- Brackets ---
def lie_bracket(V: VectorField, W: VectorField, fd_step: float = FD_STEP) -> VectorField:
    """[V, W](x) = DW(x) V(x) - DV(x) W(x).

    The bracket's own Jacobian is a centered finite difference of its value.
    """
    if V.dim != W.dim:
        raise InvalidIndexError(f"cannot bracket fields of dimension {V.dim} and {W.dim}")

    def value(x: np.ndarray) -> np.ndarray:
        return np.einsum("...ij,...j->...i", W.jacobian(x), V.value(x)) - np.einsum(
            "...ij,...j->...i", V.jacobian(x), W.value(x)
        )

    return VectorField.from_value(V.dim, value, name=f"[{V.name},{W.name}]", step=fd_step)


def bracket_field(
    fields: Sequence[VectorField], alpha: MultiIndex, fd_step: float = FD_STEP
) -> VectorField:
    """V_[alpha] for alpha = (a_1, ..., a_k): [[...[V_a1, V_a2], ...], V_ak].

    alpha ranges over A1, so the bare drift (0) is rejected like the empty word.
    """
    if alpha.is_empty:
        raise InvalidIndexError("V_[()] is the identity operator, not a vector field")
    if alpha.entries == (0,):
        raise InvalidIndexError("(0) is not in A1; the drift enters only inside brackets")
    out_of_range = [a for a in alpha if a >= len(fields)]
    if out_of_range:
        raise InvalidIndexError(
            f"letters {out_of_range} of {alpha} exceed the {len(fields) - 1} available fields"
        )
    result = fields[alpha.entries[0]]
    for letter in alpha.entries[1:]:
        result = lie_bracket(result, fields[letter], fd_step)
    return result

