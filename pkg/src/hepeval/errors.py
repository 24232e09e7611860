"""Exception types shared across the toolkit."""


class HepevalError(Exception):
    """Base class for all toolkit errors."""


class FormatError(HepevalError):
    """A file does not conform to its declared binary format."""


class UnsupportedDatatypeError(FormatError):
    """A file uses a datatype the reader deliberately does not support."""


class ShapeMismatchError(HepevalError):
    """Two volumes that must share a grid do not."""


class SchemaError(HepevalError):
    """A label id or label schema is inconsistent with the operation."""


class ParameterError(HepevalError):
    """An argument is outside its documented domain."""


class RangeError(ParameterError):
    """A scalar argument (e.g. an epoch index) is out of range."""


class GenerationError(HepevalError):
    """A phantom specification cannot be realized inside its volume."""
