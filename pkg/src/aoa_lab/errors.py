"""Exception hierarchy shared across the package."""


class AoaLabError(Exception):
    """Base class for all package errors."""


class StructuralError(AoaLabError, ValueError):
    """Input has the wrong shape or structure (non-square, non-Hermitian, ...)."""


class DomainError(AoaLabError, ValueError):
    """A scalar argument lies outside its admissible domain."""


class ConfigurationError(AoaLabError, ValueError):
    """Configuration is invalid or infeasible."""


class NumericalError(AoaLabError, ArithmeticError):
    def __init__(self, message, iterations=None):
        super().__init__(message)
        self.iterations = iterations


class ConditioningError(NumericalError):
    def __init__(self, message, condition_number):
        super().__init__(message)
        self.condition_number = condition_number


class EstimationError(AoaLabError):
    """An estimator could not produce the requested number of angles."""


class BudgetError(AoaLabError):
    """Exhaustive search refused because its operation count is too large."""

    def __init__(self, message, operations):
        super().__init__(message)
        self.operations = operations


class CheckpointError(AoaLabError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class SpecMismatchError(CheckpointError):
    pass


class DatasetError(AoaLabError):
    pass


class SweepError(AoaLabError):
    pass


class TrainingDivergedError(NumericalError):
    def __init__(self, message, iteration):
        super().__init__(message)
        self.iteration = iteration
