from dataclasses import dataclass, field, fields
from typing import Any

import numpy as np

from src.ufg_algebra import MultiIndex


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, MultiIndex):
        return value.to_json()
    if isinstance(value, Serialisable):
        return value.to_dict()
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, list | tuple):
        return [_jsonable(v) for v in value]
    return value


class Serialisable:
    def to_dict(self) -> dict[str, Any]:
        values = {f.name: getattr(self, f.name) for f in fields(self)}  # type: ignore[arg-type]
        return _jsonable(values)


@dataclass
class FilterEstimate(Serialisable):
    rho_phi: float
    rho_one: float
    pi_phi: float
    rho_phi_stderr: float = 0.0
    rho_one_stderr: float = 0.0
    pi_phi_stderr: float = 0.0
    n_samples: int = 0
    method: str = "mc"
    min_ess: float | None = None


@dataclass
class KalmanResult(Serialisable):
    mean: float
    variance: float


@dataclass
class MassBoundReport(Serialisable):
    lhs: float
    rhs: float
    constant: float
    log_lhs: float
    log_rhs: float
    passed: bool


@dataclass
class ScenarioReport(Serialisable):
    scenario_mean: float
    scenario_stderr: float
    joint_mean: float
    joint_stderr: float
    z_score: float
    n_scenarios: int


@dataclass
class LevelTerm(Serialisable):
    level: int
    word: tuple[int, ...]
    contribution: float


@dataclass
class ExpansionResult(Serialisable):
    """Per-level contributions at the query point and their running sums."""

    levels: list[float]
    partial_sums: list[float]
    terms: list[LevelTerm] = field(default_factory=list)
    level_functions: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def value(self) -> float:
        return self.partial_sums[-1]

    def to_dict(self) -> dict[str, Any]:
        return _jsonable(
            {
                "levels": self.levels,
                "partial_sums": self.partial_sums,
                "terms": [t.to_dict() for t in self.terms],
            }
        )


@dataclass
class NormDecayReport(Serialisable):
    level: int
    gamma: float
    lengths: list[float]
    norms: list[float]
    slope: float | None
    passed: bool
    trivial: bool


@dataclass
class ExponentReport(Serialisable):
    alpha: MultiIndex
    beta: MultiIndex
    target: str
    times: list[float]
    norms: list[float]
    slope: float
    theoretical_slope: float
    margin: float
    passed: bool


@dataclass
class CheckReport(Serialisable):
    """Outcome of a verify subcommand."""

    name: str
    value: float
    tolerance: float
    passed: bool
    details: dict[str, Any] = field(default_factory=dict)


@dataclass
class ConvergenceReport(Serialisable):
    """Sup-norm gap between the pathwise and direct level m as the step is halved."""

    level: int
    steps: list[float]
    errors: list[float]
    slope: float
    passed: bool


@dataclass
class RobustnessReport(Serialisable):
    level: int
    epsilons: list[float]
    shifts: list[float]
    ratios: list[float]
    passed: bool
