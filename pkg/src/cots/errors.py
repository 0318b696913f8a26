"""Exception hierarchy shared by every subsystem."""


class CotsError(Exception):
    """Base class for all package errors."""


class DimensionError(CotsError, ValueError):
    pass


class DomainError(CotsError, ValueError):
    pass


class DegenerateInputError(CotsError, ValueError):
    pass


class GraphError(CotsError, RuntimeError):
    pass


class ConfigError(CotsError, ValueError):
    pass


class GenerationError(CotsError, ValueError):
    pass


class ParseError(CotsError, ValueError):
    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record


class ParameterError(CotsError, ValueError):
    pass


class PairingError(CotsError, ValueError):
    pass


class AlignmentError(CotsError, ValueError):
    pass


class NotReadyError(CotsError):
    """Raised when the similarity queue is too short for filter statistics."""


class PreconditionError(CotsError, ValueError):
    pass


class EvaluationError(CotsError, ValueError):
    pass
