class ConfigurationError(ValueError):
    """Invalid configuration or input data (CLI exit code 2)."""


class ContractViolation(RuntimeError):
    """A caller broke an operation's precondition, e.g. chose a masked action."""


class NumericalError(ArithmeticError):
    """Factorization failed or a loss went non-finite."""


class ChecksumError(ConfigurationError):
    pass
