"""Exception types shared across the package.

Everything a caller can trigger by violating a documented contract derives
from ValueError so command-line handling can map the whole family to one
exit code.
"""


class ShapeError(ValueError):
    """Operands have incompatible or unsupported shapes."""


class DomainError(ValueError):
    """A numeric argument is outside its legal range."""


class DegenerateRowError(DomainError):
    """A row that must have positive norm is numerically zero."""


class NonFiniteError(ValueError):
    """A value that must be finite is NaN or infinite."""


class ContractError(ValueError):
    """An internal precondition between modules was violated."""


class EvaluationError(ValueError):
    """A numeric probe or check could not be evaluated."""


class ConfigError(ValueError):
    """A configuration key, value, or combination is invalid."""


class DataError(ValueError):
    """A dataset or cache file is malformed or inconsistent."""


class TrainingError(RuntimeError):
    """Training hit a non-recoverable numeric failure."""
