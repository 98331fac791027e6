"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(ValueError):
    """A configuration value is outside its legal range."""


class DataError(ValueError):
    """Input data violates a documented contract."""


class ManifestError(DataError):
    """A dataset manifest failed to parse or validate."""


class ProtocolError(ValueError):
    """A fold plan or metric aggregation request is ill-posed."""


class UsageError(RuntimeError):
    """An API was called in an unsupported way."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""
