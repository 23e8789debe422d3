"""Exception hierarchy shared across the package."""


class AesimError(Exception):
    """Base class for all package errors."""


class DimensionError(AesimError, ValueError):
    """Operand shapes are incompatible."""


class InvalidMaskError(AesimError, ValueError):
    """A mask leaves no valid position where at least one is required."""


class ContractError(AesimError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(AesimError, ValueError):
    """A configuration value is out of range."""


class NumericError(AesimError, ArithmeticError):
    """A computation produced a non-finite value."""


class TrainingError(NumericError):
    """Training diverged or received unusable gradients."""


class DataError(AesimError, ValueError):
    """Input data is malformed or inconsistent."""


class ParseError(DataError):
    """A data file could not be parsed."""


class CheckpointError(AesimError, IOError):
    """A checkpoint file is corrupt, truncated, or of an unknown version."""
