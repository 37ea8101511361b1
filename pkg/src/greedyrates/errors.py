"""Exception types shared across the package."""


class ContractError(ValueError):
    """A caller broke a documented precondition."""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of a function."""


class ConfigError(ValueError):
    """A configuration is malformed or violates a model precondition."""


class DataError(ValueError):
    """Input data (for example a density grid) fails validation."""


class NumericError(ArithmeticError):
    """A numerical routine could not meet its declared tolerance."""


class EvaluationError(NumericError):
    """A Q-surface returned a non-finite value."""

    def __init__(self, x, a, value):
        self.x = x
        self.a = a
        self.value = value
        super().__init__(f"non-finite Q value {value!r} at state={x!r}, action={a!r}")
