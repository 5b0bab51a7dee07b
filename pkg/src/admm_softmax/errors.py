"""Exception hierarchy shared across the package."""


class AdmmSoftmaxError(Exception):
    """Base class for every error raised by this package."""


class DimensionMismatch(AdmmSoftmaxError, ValueError):
    pass


class NotPositiveDefinite(AdmmSoftmaxError, ArithmeticError):
    pass


class BreakdownDetected(AdmmSoftmaxError, ArithmeticError):
    """CG met a search direction with non-positive curvature."""


class NonPositiveRho(AdmmSoftmaxError, ValueError):
    pass


class LineSearchFailure(AdmmSoftmaxError, ArithmeticError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class DivergenceDetected(AdmmSoftmaxError, ArithmeticError):
    pass


class FormatError(AdmmSoftmaxError, ValueError):
    """Malformed input file. ``offset`` is a byte offset or ``line`` a line number."""

    def __init__(self, message, offset=None, line=None):
        where = ""
        if offset is not None:
            where = f" (at byte offset {offset})"
        elif line is not None:
            where = f" (at line {line})"
        super().__init__(message + where)
        self.offset = offset
        self.line = line


class CountMismatch(AdmmSoftmaxError, ValueError):
    pass


class LabelOutOfRange(AdmmSoftmaxError, ValueError):
    pass


class InsufficientExamples(AdmmSoftmaxError, ValueError):
    pass


class ConfigError(AdmmSoftmaxError, ValueError):
    pass
