"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(ValueError):
    """A call violated an operation's precondition (e.g. backward on a non-scalar)."""


class ConfigError(ValueError):
    """Invalid model or run configuration."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


class DeterminismError(RuntimeError):
    """A function that must be deterministic returned differing values."""


class AccountingError(ValueError):
    """The cost model was asked about a primitive it does not know."""


class DivergenceError(RuntimeError):
    """Training loss blew up past the allowed factor of its initial value."""
