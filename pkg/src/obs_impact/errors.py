"""Exception types shared across the package."""


class ObsImpactError(Exception):
    """Base class for all package errors."""


class ConfigError(ObsImpactError):
    """Invalid or unknown configuration key/value."""


class NonFiniteState(ObsImpactError):
    """A model state picked up NaN/Inf entries (usually a CFL violation).

    ``step_index`` is set when the failure occurred inside a multi-step
    integration, so callers can locate the failing step.
    """

    def __init__(self, message, step_index=None):
        if step_index is not None:
            message = f"{message} (at step {step_index})"
        super().__init__(message)
        self.step_index = step_index


class NonPositiveDepth(ObsImpactError):
    """Fluid thickness h dropped to zero or below."""


class TrajectoryMismatch(ObsImpactError):
    """A supplied checkpoint store does not match the given initial state."""


class DimensionMismatch(ObsImpactError):
    """Vector length inconsistent with the operator or grid."""


class IndexOutOfRange(ObsImpactError):
    """Observation time index or grid index outside the valid range."""


class SiteNotObserved(ObsImpactError):
    """Fault injection requested at a site absent from the final-time selector."""


class FactorizationFailure(ObsImpactError):
    """Covariance factorization failed (matrix not SPD); consider a larger
    eigenvalue floor."""


class SizeGuard(ObsImpactError):
    """Dense operation refused: problem dimension exceeds the guard."""


class OddGrid(ObsImpactError):
    """Grid transfer requires an even number of points per direction."""


class NoValidPairs(ObsImpactError):
    """No curvature pairs with positive <s, y> available for the limited-memory
    preconditioner."""


class NonPositiveRitzValue(ObsImpactError):
    """Spectral preconditioner given a non-positive approximate eigenvalue."""


class RankDeficientSketch(ObsImpactError):
    """Randomized range sketch is numerically rank deficient; reduce the
    ensemble size."""


class StepTooSmallWarning(UserWarning):
    """Finite-difference Hessian product is numerically negligible."""
