"""Exception types shared across the package."""


class QuadgateError(Exception):
    """Base class for all package errors."""


class DimensionError(QuadgateError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(QuadgateError, ValueError):
    """A precondition of an operation was violated."""


class ConfigurationError(QuadgateError, ValueError):
    """A model or run configuration is invalid."""


class StateError(QuadgateError, RuntimeError):
    """An object is not in the state an operation needs."""


class NumericalError(QuadgateError, ArithmeticError):
    """A non-finite value appeared where a finite one was required."""


class DataError(QuadgateError, ValueError):
    """Input data on disk could not be loaded."""


class CheckpointError(QuadgateError):
    """Base class for checkpoint format problems."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointConfigError(CheckpointError):
    pass
