"""Exception types shared across the package."""


class ApisLabError(Exception):
    """Base class for all package-specific errors."""


class DuplicatePoint(ApisLabError):
    """The exact (instance, x, y) pixel was already labeled."""


class OutOfBox(ApisLabError):
    """A point coordinate lies outside its instance's bounding box."""


class InvalidConstant(ApisLabError):
    """A cost-model constant is outside its valid range."""


class UnknownInstance(ApisLabError):
    """A query references an instance absent from the dataset."""


class DuplicateMaskQuery(ApisLabError):
    """A mask was already queried (and charged) for this instance."""


class GenerationExhausted(ApisLabError):
    """Scene generation failed within the retry bound (over-constrained config)."""


class IoFailure(ApisLabError):
    """A dataset directory or file could not be read or written."""


class FormatViolation(ApisLabError):
    """A stored file does not conform to its documented byte format."""


class DegenerateBox(ApisLabError):
    """A box region required for feature extraction is empty."""


class ModeUnavailable(ApisLabError):
    """The requested prediction mode lacks prepared replicas or scales."""


class EmptySupervision(ApisLabError):
    """Training was requested with no labeled points or masks."""


class EmptyPredictionSet(ApisLabError):
    """An operation requiring K >= 1 prediction maps received K = 0."""


class InsufficientPredictions(ApisLabError):
    """Variance requires K >= 2 prediction maps."""


class DomainError(ApisLabError):
    """A probability argument lies outside [0, 1]."""


class EmptyDomain(ApisLabError):
    """Every candidate pixel of the instance's box is already labeled."""


class MissingPointSets(ApisLabError):
    """A transfer source run lacks the per-step point-set files."""


class ExtentMismatch(ApisLabError):
    """Two masks being compared have different shapes."""


class EmptyPointSet(ApisLabError):
    """An operation requiring a non-empty point set received an empty one."""


class EmptyMask(ApisLabError):
    """An instance's visible mask has no pixels."""


class ConfigError(ApisLabError):
    """An experiment or CLI configuration is invalid."""
