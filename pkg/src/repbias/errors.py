"""Exception hierarchy.

``ValidationError`` covers bad inputs and violated preconditions (CLI exit
code 1). ``DiagnosticError`` covers failures that only show up once data is
processed (CLI exit code 2).
"""


class ReprBiasError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(ReprBiasError):
    pass


class DiagnosticError(ReprBiasError):
    pass


class ShapeMismatch(ValidationError):
    pass


class ZeroNorm(DiagnosticError):
    pass


class NonFiniteValue(ValidationError):
    pass


class NonFiniteLoss(DiagnosticError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class EmptyInput(ValidationError):
    pass


class NoSamples(DiagnosticError):
    pass


class UnknownAttribute(ValidationError):
    pass


class DuplicateEdge(ValidationError):
    pass


class SelfEdge(ValidationError):
    pass


class EmptyLabel(ValidationError):
    pass


class BinMismatch(ValidationError):
    pass


class IsolatedAttribute(DiagnosticError):
    pass


class EmptyMode(DiagnosticError):
    """The selected failure-mode cell has no training samples.

    The chosen mode is still attached so callers can report it.
    """

    def __init__(self, message, mode=None):
        super().__init__(message)
        self.mode = mode


class EmptyStratum(DiagnosticError):
    pass


class RegionOverflow(ValidationError):
    pass


class PathError(ValidationError):
    pass


class DegenerateAttributeWarning(UserWarning):
    """An attribute has a single value across all samples and cannot be mined."""
