"""Exception types raised across the package."""


class KPMError(Exception):
    """Base class for all package errors."""


class DimensionError(KPMError, ValueError):
    pass


class ParameterError(KPMError, ValueError):
    pass


class BatchSizeError(KPMError, ValueError):
    pass


class ContractError(KPMError, ValueError):
    pass


class StateError(KPMError, RuntimeError):
    pass


class EvaluationError(KPMError, ArithmeticError):
    """A function under evaluation produced a non-finite value."""


class NonFiniteError(EvaluationError):
    pass


class FormatError(KPMError, ValueError):
    pass


class TruncatedFileError(KPMError, OSError):
    pass


class SamplingError(KPMError, ValueError):
    pass


class TrainingError(KPMError, RuntimeError):
    pass


class ConfigError(KPMError, ValueError):
    def __init__(self, message, lines=()):
        super().__init__(message)
        self.lines = tuple(lines)
