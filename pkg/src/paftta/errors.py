class PafttaError(Exception):
    """Base class for library errors."""


class ConfigurationError(PafttaError, ValueError):
    pass


class NumericalError(PafttaError, ArithmeticError):
    pass


class ContractError(PafttaError, RuntimeError):
    pass


class UndefinedMetricError(PafttaError, ValueError):
    """A metric has no defined value for the given input (e.g. no closed samples)."""


class StreamExhausted(PafttaError, StopIteration):
    pass
