"""Exception hierarchy shared across the pipeline."""


class CnnInteError(Exception):
    """Base class for every error raised by this package."""


class DataError(CnnInteError):
    """Malformed or unusable input data (maps to CLI exit code 2)."""


class BadMagic(DataError):
    pass


class Truncated(DataError):
    pass


class LabelOutOfRange(DataError):
    pass


class EmptyDataset(DataError):
    pass


class ShapeMismatch(CnnInteError, ValueError):
    pass


class NonFiniteGradient(CnnInteError, FloatingPointError):
    pass


class TooFewPoints(CnnInteError, ValueError):
    pass


class IndexOutOfRange(CnnInteError, IndexError):
    pass


class InconsistentEnsemble(CnnInteError):
    pass


class ArtifactError(DataError):
    """Corrupt, mismatched or unknown persisted artifact."""
