"""Exception hierarchy shared by all wittenlab modules."""


class WittenLabError(Exception):
    """Base class for all package errors."""


class InvalidGeometryError(WittenLabError):
    """Lattice construction with non-positive extents or dimension."""


class UnknownSiteError(WittenLabError):
    """A site outside the lattice was referenced."""


class EmptySupportError(WittenLabError):
    """A set-distance or weight requested against an empty site set."""


class InvalidParameterError(WittenLabError):
    """A numeric argument outside its admissible range."""


class UnsupportedOrderError(WittenLabError):
    """A derivative order beyond the implemented closed forms."""


class ConvexityRiskError(WittenLabError):
    """A tilt magnitude that may destroy uniform convexity."""


class EvaluationError(WittenLabError):
    """Non-finite value produced while evaluating a model or field."""


class InvalidGridError(WittenLabError):
    """Grid construction with an even point count or bad half-width."""


class ResourceLimitError(WittenLabError):
    """A memory or size budget would be exceeded."""


class ShapeMismatchError(WittenLabError):
    """Fields on incompatible grids were combined."""


class DefinitenessError(WittenLabError):
    """The one-form operator was found indefinite or singular."""


class ConvergenceError(WittenLabError):
    """An iterative solve failed to reach its tolerance."""


class EmptyMaskError(WittenLabError):
    """No grid node carries enough Gibbs weight to report a solution."""


class MeasureError(WittenLabError):
    """Degenerate normalization of the Gibbs measure."""


class ArityError(WittenLabError):
    """A correlation of fewer than two observables was requested."""


class SupportError(WittenLabError):
    """An observable support incompatible with the requested report."""


class InsufficientDataError(WittenLabError):
    """Too few usable points for a decay fit."""


class AssumptionNotMetError(WittenLabError):
    """A mathematical precondition was checked numerically and failed."""


class WindowError(WittenLabError):
    """A finite-difference stencil leaves the admissible parameter window."""


class ConfigError(WittenLabError):
    """An experiment configuration failed validation."""
