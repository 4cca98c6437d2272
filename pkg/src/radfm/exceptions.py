"""Exception hierarchy shared by every module.

Each category maps to one CLI exit code (see :mod:`radfm.cli`).
"""


class RadfmError(Exception):
    """Base class for all package errors."""

    category = "error"


class ConfigError(RadfmError):
    category = "config"


class DataError(RadfmError):
    category = "data"


class IntegrityError(RadfmError):
    category = "integrity"


class DomainError(RadfmError, ValueError):
    """An argument lies outside its mathematical domain."""

    category = "domain"


class ShapeError(RadfmError, ValueError):
    category = "shape"


class NumericError(RadfmError, FloatingPointError):
    """Raised when a training loss goes non-finite."""

    category = "numeric"

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
