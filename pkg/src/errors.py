"""Exception hierarchy.

Validation-class errors map to exit code 2, numerical guards to exit code 3.
"""

from src.constants import ExitCode


class ZakaiLabError(Exception):
    exit_code = ExitCode.FAILURE


class ConfigError(ZakaiLabError):
    exit_code = ExitCode.VALIDATION

    def __init__(self, message: str, key_path: str = "") -> None:
        super().__init__(f"{key_path}: {message}" if key_path else message)
        self.key_path = key_path


class InvalidIndexError(ZakaiLabError, ValueError):
    exit_code = ExitCode.VALIDATION


class DimensionMismatchError(ZakaiLabError, ValueError):
    exit_code = ExitCode.VALIDATION


class OffGridTimeError(ZakaiLabError, ValueError):
    exit_code = ExitCode.VALIDATION


class UnsupportedError(ZakaiLabError, ValueError):
    exit_code = ExitCode.VALIDATION


class NumericalGuardError(ZakaiLabError, ArithmeticError):
    exit_code = ExitCode.NUMERICAL_GUARD


class DivergenceError(NumericalGuardError):
    def __init__(self, step: int, detail: str = "non-finite state") -> None:
        super().__init__(f"{detail} at step {step}")
        self.step = step


class DegenerateWeightsError(NumericalGuardError):
    pass


class WeightCollapseError(NumericalGuardError):
    def __init__(self, step: int, ess: float) -> None:
        super().__init__(f"effective sample size {ess:.3g} below threshold at step {step}")
        self.step = step
        self.ess = ess


class VacuousFitError(NumericalGuardError):
    pass


class BoundaryContaminationError(NumericalGuardError):
    pass


class DegenerateFitError(NumericalGuardError):
    pass


class NonConvergenceError(NumericalGuardError):
    pass


class SeriesDivergenceError(NumericalGuardError):
    pass
