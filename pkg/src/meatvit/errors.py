"""Exception types shared across the package."""


class MeatError(Exception):
    """Base class for all errors raised by meatvit."""


class ShapeError(MeatError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(MeatError, ValueError):
    """A precondition of an operation was violated."""


class NumericDomainError(MeatError, ValueError):
    """Input contains NaN or infinite values."""


class DegenerateMaskError(MeatError, ValueError):
    """Every key of a masked softmax row is inactive."""


class ConfigError(MeatError, ValueError):
    """Invalid configuration value or missing key.

    ``key`` names the offending key when known and ``line`` is the 1-based line
    number in the source config file when known.
    """

    def __init__(self, message, key=None, line=None):
        super().__init__(message)
        self.key = key
        self.line = line


class FormatError(MeatError, ValueError):
    """A binary container is malformed.

    ``field`` names the header field or block being decoded and ``offset`` is
    the byte offset at which decoding failed.
    """

    def __init__(self, message, field=None, offset=None):
        if field is not None or offset is not None:
            message = f"{message} (field={field}, offset={offset})"
        super().__init__(message)
        self.field = field
        self.offset = offset


class DivergenceError(MeatError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class UnknownTaskError(MeatError, KeyError):
    """No head or mask set is registered for the requested task."""

    def __str__(self):
        return str(self.args[0]) if self.args else "unknown task"
