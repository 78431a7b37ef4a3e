"""Exception and warning taxonomy shared across the package.

Every numerical failure mode raises a subclass of ``FactorModelError`` so
callers (and the CLI exit-code mapping) can catch one base type.
"""


class FactorModelError(Exception):
    """Base class for all numerical/model failures in this package."""


class DegenerateFactor(FactorModelError):
    """The design annihilates a left vector: l' (X'X/n) l is numerically zero."""


class RankDeficient(FactorModelError):
    """Sequential extraction produced a zero layer before reaching the requested rank."""


class TiedSingularValues(FactorModelError):
    """Fitted singular values tie to working precision; layer order is undefined."""


class SingularColumn(FactorModelError):
    """A nodewise regression left no residual variance (duplicate/constant column)."""


class NearSingularCore(FactorModelError):
    """The trailing-layer core matrix in the left-debias linearization is near singular."""


class SingularA(FactorModelError):
    """The cross-layer core A of the strong-mode correction is near singular."""


class SingularSigma11(FactorModelError):
    """The factor block of the design covariance is near singular; cannot condition on it."""


class NotPositive(FactorModelError):
    """A plug-in variance came out non-positive; no interval can be formed."""


class NoConvergenceWarning(UserWarning):
    """An alternating solver hit its iteration cap; the last iterate was returned."""


class DesignScaleWarning(UserWarning):
    """Design columns deviate from the sqrt(n) normalization the theory assumes."""
