"""Exception hierarchy shared by all modules."""


class SemiPruneError(Exception):
    """Base class for every error raised by this package."""

    kind = "error"


class ShapeError(SemiPruneError, ValueError):
    kind = "shape-error"


class ParameterError(SemiPruneError, ValueError):
    kind = "parameter-error"


class DomainError(SemiPruneError, ValueError):
    kind = "domain-error"


class NumericError(SemiPruneError, ArithmeticError):
    kind = "numeric-error"


class DataError(SemiPruneError, ValueError):
    kind = "data-error"


class StructureError(SemiPruneError, ValueError):
    kind = "structure-error"


class UsageError(SemiPruneError, RuntimeError):
    kind = "usage-error"


class TrainingError(SemiPruneError, RuntimeError):
    """Raised when the objective becomes non-finite.

    The failing optimizer step is kept in :attr:`step`.
    """

    kind = "training-error"

    def __init__(self, message, step):
        super().__init__(f"{message} (step {step})")
        self.step = step
