"""Exception hierarchy for the engine.

Every error a caller can act on derives from :class:`FinslerError`.  The CLI
maps input/domain errors to exit code 2 and nonconvergence to exit code 3.
"""


class FinslerError(Exception):
    """Base class for all engine errors."""


class ParseError(FinslerError):
    """Lexical or syntactic error in a metric expression.

    Carries the byte offset of the offending lexeme.
    """

    def __init__(self, message, offset, lexeme=""):
        self.offset = offset
        self.lexeme = lexeme
        super().__init__(f"{message} (offset {offset}" +
                         (f", near {lexeme!r})" if lexeme else ")"))


class EvalDomainError(FinslerError):
    """Evaluation left the expression's domain (sqrt of negative, x/0, ...).

    ``span`` is the (start, end) byte range of the failing subtree when the
    expression came from source text; synthetic trees carry ``span=None``.
    """

    def __init__(self, message, span=None):
        self.span = span
        if span is not None:
            message = f"{message} (source bytes {span[0]}..{span[1]})"
        super().__init__(message)


class ChartError(FinslerError):
    """A point left the chart's validity region."""

    def __init__(self, message, exit_time=None):
        self.exit_time = exit_time
        super().__init__(message)


class SlitError(FinslerError):
    """Tangent vector too close to the zero section for slit-bundle ops."""


class DegenerateFlagError(FinslerError):
    """Flag denominator below the scale-free threshold."""


class ClassificationError(FinslerError):
    """Operation gated on a metric class the metric does not belong to."""


class ConvergenceError(FinslerError):
    """An iterative solver failed to converge; carries the best residual."""

    def __init__(self, message, residual=None):
        self.residual = residual
        super().__init__(message)


class InputError(FinslerError):
    """Malformed user input: unknown catalog name, bad parameter, bad config."""
