from enum import IntEnum, StrEnum


class Preset(StrEnum):
    LINEAR_GAUSSIAN = "linear-gaussian"
    CUBIC_SENSOR = "cubic-sensor"
    BM_1D = "bm-1d"
    OU_TANH = "ou-tanh"
    BM_2D = "bm-2d"
    CUSTOM = "custom"


class BackendKind(StrEnum):
    GRID = "grid"
    MONTE_CARLO = "mc"


class PropagationMethod(StrEnum):
    AUTO = "auto"
    EXPM = "expm"
    CRANK_NICOLSON = "crank-nicolson"
    EXPM_MULTIPLY = "expm-multiply"


class AdjointForm(StrEnum):
    FORMULA = "formula"
    TRANSPOSE = "transpose"


class PsiForm(StrEnum):
    COMMUTATOR = "commutator"
    FORMULA = "formula"


class Target(StrEnum):
    HEAT = "heat"
    RHO = "rho"
    PI = "pi"


class Oracle(StrEnum):
    KALMAN = "kalman"
    PARTICLE = "particle"


class ExtensionSchedule(StrEnum):
    DYADIC = "dyadic"
    COARSENING = "coarsening"


class Subcommand(StrEnum):
    SIMULATE = "simulate"
    FILTER = "filter"
    EXPAND = "expand"
    ROBUST = "robust"
    SIGNATURE = "signature"
    GRADIENT = "gradient"
    VERIFY = "verify"


class VerifyCheck(StrEnum):
    CHEN = "chen"
    NEOCLASSICAL = "neoclassical"
    REMAINDER = "remainder"
    DUALITY = "duality"
    MASSBOUND = "massbound"
    EXTENSION = "extension"


class ExitCode(IntEnum):
    OK = 0
    FAILURE = 1
    VALIDATION = 2
    NUMERICAL_GUARD = 3


class RandomStream(IntEnum):
    """Spawn keys separating the independent noise sources of one root seed."""

    SIGNAL = 0
    OBSERVATION = 1
    FILTER = 2
    PARTICLE = 3
    SCENARIO = 4


LOGGER_NAME = "zakai-lab"
RESULTS_ENV_VAR = "ZAKAI_LAB_RESULTS"
DEFAULT_RESULTS_ROOT = "results"

# Spatial grids
DEFAULT_HALF_WIDTH = 8.0
DEFAULT_GRID_POINTS = 401
DENSE_LIMIT = 500
CN_MAX_SUBSTEP = 1e-3
BOUNDARY_LAYER = 10

# Finite differences for nested brackets and flows
FD_STEP = 1e-5

# Monte Carlo
PATH_CHUNK_SIZE = 4096
WEIGHT_FLOOR = 1e-300
MIN_EFFECTIVE_SAMPLE_SIZE = 2.0

# Perturbation series
MAX_EXPANSION_LEVEL = 8
MAX_OBSERVATION_CHANNELS = 3
MAX_IBP_LEVEL = 3
MAX_NORM_DECAY_LEVEL = 4
DICTIONARY_VERSION = 1
DICTIONARY_SIZE = 32

# Iterated integrals
MAX_REFINEMENT_DEPTH = 16
EXTENSION_TOLERANCE = 1e-10
MIN_DYADIC_STEPS = 4

# Gradient fits
MIN_FIT_SCALES = 5
VACUOUS_NORM = 1e-12

# Pathwise representation
IBP_TERMS_FIXTURE = "resources/ibp_terms_v1.json"
ROBUSTNESS_EPSILONS = (1e-3, 1e-4)

# Gradient fits
FIT_MARGIN = 0.1
ORDERING_TOLERANCE = 0.15
GRADIENT_T_MAX = 0.1
GRADIENT_SCALES = 7
QUOTIENT_GUARD = 1e-12
