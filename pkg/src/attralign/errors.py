"""Exception hierarchy shared by all modules.

Every domain failure derives from :class:`ArtifactError`; the CLI maps these
to exit code 1 while usage errors exit with 2.
"""


class ArtifactError(Exception):
    """Base class for all domain errors raised by this package."""


# -- vector/matrix arithmetic -------------------------------------------------

class DimensionMismatch(ArtifactError):
    """Operands have incompatible dimensions or shapes."""


# Shape complaints from the optimizer and data loaders are the same failure.
DimMismatch = DimensionMismatch
ShapeMismatch = DimensionMismatch


class DegenerateVector(ArtifactError):
    """A vector with (near-)zero norm where a direction is required."""


class NonFiniteValue(ArtifactError):
    """NaN or Inf encountered where only finite values are allowed."""


class EmptyInput(ArtifactError):
    """An operation received an empty collection."""


class NonScalarOutput(ArtifactError):
    """Reverse-mode differentiation requires a scalar output node."""


# -- dataset ------------------------------------------------------------------

class EmptySequence(ArtifactError):
    """Pooling requires a non-empty sequence of vectors."""


class InvalidConfig(ArtifactError):
    """A configuration value violates its invariants."""


class FormatError(ArtifactError):
    """An on-disk artifact is malformed; the message names the location."""


class UnknownCategory(ArtifactError):
    """A sample references a category id absent from the category table."""


# -- mining -------------------------------------------------------------------

class TooFewCategories(ArtifactError):
    """Hard-negative mining needs at least two categories."""


# -- losses -------------------------------------------------------------------

class EmptyNegativeSet(ArtifactError):
    """Category-category repulsion requires at least one negative per row."""


# -- training -----------------------------------------------------------------

class MiningIncomplete(ArtifactError):
    """The negative set does not cover every training sample."""


class ConfigError(ArtifactError):
    """A training configuration value is out of range."""


# -- diagnostics --------------------------------------------------------------

class DegenerateLabels(ArtifactError):
    """A class is absent from the probe training labels."""


class EmptyClass(ArtifactError):
    """A per-class statistic was requested for a class with no samples."""


class ChoicesOutOfRange(ArtifactError):
    """Multiple-choice candidate count outside [1, num_categories]."""


class DegenerateCovariance(ArtifactError):
    """Covariance rank below two; no 2-D principal plane exists."""


# -- attribute pipeline --------------------------------------------------------

class TransportError(ArtifactError):
    """A chat/VQA endpoint call failed after exhausting retries."""


class ParseError(ArtifactError):
    """An endpoint response could not be parsed; carries the raw text."""

    def __init__(self, message: str, raw_response: str = ""):
        super().__init__(message)
        self.raw_response = raw_response


class MissingKeys(ArtifactError):
    """Summarization requires every attribute key to be extracted first."""

    def __init__(self, message: str, keys=()):
        super().__init__(message)
        self.keys = tuple(keys)


class EmptyText(ArtifactError):
    """The toy embedder refuses empty input."""


class UnboundPlaceholder(ArtifactError):
    """A prompt template was rendered with an unbound placeholder."""
