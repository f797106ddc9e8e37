"""Exception types shared across the package."""


class BoneSupError(Exception):
    """Base class for all package errors."""


class DimensionError(BoneSupError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(BoneSupError, ArithmeticError):
    """A computation produced, or would produce, a non-finite value."""


class UsageError(BoneSupError, ValueError):
    """An API was called in a way its contract forbids."""


class ConfigError(BoneSupError, ValueError):
    """Invalid configuration (sizes, ratios, unknown keys)."""


class FormatError(BoneSupError, ValueError):
    """A file does not follow its expected binary or text layout.

    ``offset`` is the byte offset where parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UndefinedMetricError(BoneSupError, ValueError):
    """The metric is mathematically undefined for the given input."""


class DivergenceError(BoneSupError, RuntimeError):
    """Training produced a non-finite loss and was aborted."""
