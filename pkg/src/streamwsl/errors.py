"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when an operation receives arguments outside its contract."""


class ConfigError(ValueError):
    """Raised for invalid or infeasible configuration values."""


class TrainingError(RuntimeError):
    """Raised when a detector component cannot be fitted."""


class ContractViolation(RuntimeError):
    """Raised when a stateful protocol is used out of order (e.g. rewinding a stream)."""
