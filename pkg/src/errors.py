"""Exception hierarchy shared by the library, the CLI and the HTTP app."""
from __future__ import annotations


class FewSegError(Exception):
    """Base class for every error raised on purpose by this package."""


class InvalidRangeError(FewSegError, ValueError):
    pass


class ShapeMismatchError(FewSegError, ValueError):
    pass


class DegenerateTimestepError(FewSegError, ValueError):
    pass


class MissingOriginalError(FewSegError, ValueError):
    pass


class GateLengthError(FewSegError, ValueError):
    pass


class SampleSizeError(FewSegError, ValueError):
    pass


class ConfigurationError(FewSegError, ValueError):
    pass


class InsufficientDataError(FewSegError):
    pass


class FoldMismatchError(FewSegError):
    pass


class TrainingDivergedError(FewSegError):
    pass


class CheckpointCorruptError(FewSegError):
    pass


class ManifestMismatchError(CheckpointCorruptError):
    pass


class InvalidDatasetError(FewSegError):
    pass
