"""Exception hierarchy.

Validation problems subclass ``ValueError``; file/format problems subclass
``OSError`` so callers (and the CLI exit-code mapping) can tell them apart.
"""


class WsiGraphError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(WsiGraphError, ValueError):
    """Input violates a documented invariant."""


class AlignmentError(ValidationError):
    """Feature rows cannot be matched one-to-one with patches."""


class EmptyResultError(ValidationError):
    pass


class FormatError(WsiGraphError, OSError):
    """File contents do not follow the expected on-disk format."""


class ParseError(FormatError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class LengthError(FormatError):
    """Binary payload is shorter or longer than its header declares."""


class NumericError(WsiGraphError, ArithmeticError):
    pass


class UndefinedMetricError(WsiGraphError, ValueError):
    """Metric is undefined for the given input (no pairs, one class, ...)."""


class TrainingError(WsiGraphError, RuntimeError):
    pass
