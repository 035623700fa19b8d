"""Exception hierarchy shared across the package.

Every error feedlab raises deliberately derives from FeedlabError so callers
(and the CLI exit-code mapping) can distinguish our failures from bugs.
"""

from __future__ import annotations


class FeedlabError(Exception):
    """Base class for all feedlab errors."""


class ConfigError(FeedlabError):
    """A configuration value is missing, malformed, or inconsistent."""


class DomainError(FeedlabError):
    """An input is outside the domain an operation accepts (bad action,
    wrong environment, stepping a finished episode, ...)."""


class UnsupportedEnvError(DomainError):
    """The requested operation is not defined for this environment."""


class CalibrationError(FeedlabError):
    """Rating calibration failed, e.g. a degenerate return range."""


class GenerationExhaustedError(FeedlabError):
    """A rejection-sampling generator ran out of retry budget.

    Carries whatever instances were produced before giving up so callers can
    decide whether a partial result is usable.
    """

    def __init__(self, message: str, partial: list | None = None):
        super().__init__(message)
        self.partial = partial if partial is not None else []


class DataError(FeedlabError):
    """A persisted artifact could not be read back faithfully."""


class SchemaError(DataError):
    """Header missing, unparseable, or written by an incompatible schema."""


class DatasetTypeError(DataError):
    """The file holds a different feedback type than the caller asked for."""


class TruncatedFileError(DataError):
    """The file ends before the record count promised by its header."""


class HashMismatchError(DataError):
    """Stored payload checksum does not match the bytes on disk."""


class StageError(FeedlabError):
    """A pipeline stage failed; the manifest records it for resumption."""
