"""Exception hierarchy shared across carfield modules."""


class CarfieldError(Exception):
    """Base class for all carfield errors."""


class InvalidDimensionsError(CarfieldError, ValueError):
    pass


class SingularTransformError(CarfieldError, ValueError):
    pass


class BehindCameraError(CarfieldError, ValueError):
    pass


class InvalidIntervalError(CarfieldError, ValueError):
    pass


class ShapeError(CarfieldError, ValueError):
    """Tensor widths or spatial sizes do not agree."""


class StateError(CarfieldError, RuntimeError):
    pass


class ConfigError(CarfieldError, ValueError):
    pass


class DataError(CarfieldError):
    """Problems with input data: manifests, fixtures, detector outputs."""


class SchemaError(DataError, ValueError):
    pass


class ReferencedFileError(DataError, FileNotFoundError):
    pass


class ParseError(DataError, ValueError):
    pass


class NumericError(CarfieldError, ArithmeticError):
    """Non-finite values encountered during optimization."""
