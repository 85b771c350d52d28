"""Exception hierarchy shared by every module.

The CLI maps each category to a distinct exit code.
"""


class FedError(Exception):
    """Base class for all simulator errors."""

    category = "error"


class StructuralError(FedError, ValueError):
    """Shapes or index maps do not line up."""

    category = "structural"


class NumericalError(FedError, ArithmeticError):
    """A non-finite value or a failed decomposition."""

    category = "numerical"


class CapacityError(FedError, ValueError):
    """A requested computation exceeds a configured size cap."""

    category = "capacity"


class DomainError(FedError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""

    category = "domain"


class ConfigError(FedError, ValueError):
    """Invalid experiment configuration or CLI invocation."""

    category = "config"
