"""Exception hierarchy shared by every qforest module."""


class QForestError(Exception):
    """Base class for all errors raised by qforest."""


class ShapeError(QForestError, ValueError):
    pass


class PreconditionError(QForestError, ValueError):
    pass


class IsometryError(PreconditionError):
    pass


class ArgumentError(QForestError, ValueError):
    pass


class FormatError(QForestError, ValueError):
    """Malformed dataset or model container file."""


class DataError(QForestError, ValueError):
    pass


class DegenerateInputError(QForestError, ValueError):
    pass


class DegenerateGaugeError(DegenerateInputError):
    """Canonicalization hit an exactly-zero node tensor."""


class NumericalConsistencyError(QForestError, ArithmeticError):
    pass


class UnderflowError(NumericalConsistencyError):
    pass


class DivergenceError(QForestError, ArithmeticError):
    """Training produced a non-finite loss.

    ``checkpoint`` holds the last parameters that produced a finite loss.
    """

    def __init__(self, message, checkpoint=None, log=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.log = log


class StateError(QForestError, RuntimeError):
    pass


class StaleCacheError(StateError):
    pass


class StepTooLargeError(QForestError, ArithmeticError):
    pass


class KindError(QForestError, ValueError):
    """A model container holds the wrong kind of model for the command."""
