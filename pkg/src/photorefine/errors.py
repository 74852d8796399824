"""Exception hierarchy.

Validation problems (bad inputs, malformed files) derive from
:class:`ValidationError`; failures of a numerical procedure derive from
:class:`NumericalError`. The CLI maps the two families to exit codes 2 and 3.
"""


class PhotorefineError(Exception):
    """Base class for all package errors."""


class ValidationError(PhotorefineError, ValueError):
    pass


class NumericalError(PhotorefineError, ArithmeticError):
    pass


class NonPositiveDepth(NumericalError):
    pass


class Unsampleable(NumericalError):
    pass


class ZeroVariance(NumericalError):
    pass


class OutsideLattice(ValidationError):
    pass


class TooFewMatches(NumericalError):
    pass


class InsufficientObservations(NumericalError):
    pass


class TooFewObservations(NumericalError):
    pass


class DegenerateWeights(NumericalError):
    pass


class SolverDivergence(NumericalError):
    pass


class SurfaceOutOfFrustum(ValidationError):
    pass
