"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateInputError(ValueError):
    """An input is empty or otherwise carries no usable signal."""


class DegenerateVectorError(DegenerateInputError):
    """A vector norm fell below the cosine-similarity threshold."""


class VocabularyError(KeyError):
    """A token is not part of the closed vocabulary."""


class ConfigurationError(ValueError):
    """A size or switch combination cannot be realized."""


class BatchCompositionError(ValueError):
    """A contrastive batch lacks the positives/negatives it needs."""


class TrainingAborted(FloatingPointError):
    """Raised when a loss or gradient becomes non-finite."""


class GenerationError(RuntimeError):
    """Procedural generation could not satisfy its constraints."""


class PlanningError(RuntimeError):
    """No path exists between the requested cells."""


class PoseError(ValueError):
    """An agent pose lies outside free space."""


class DegenerateTestError(ValueError):
    """A statistical test has no informative observations."""


class EmptyMemoryError(DegenerateInputError):
    """Attention was asked to read from zero keys."""


class BatchTooSmallError(BatchCompositionError):
    """A contrastive loss needs at least two samples."""


class AssemblyError(DimensionError):
    """Sequence blocks disagree on width."""


class DataError(ValueError):
    """Evaluation records carry impossible values."""
