"""Exception types raised by uvmatch.

Everything derives from :class:`UvmatchError` so callers can catch one
type at the boundary.  Plain I/O problems (unreadable path, permission
denied) are left to the builtin ``OSError`` family.
"""


class UvmatchError(Exception):
    """Base class for all uvmatch errors."""


class MalformedHeaderError(UvmatchError):
    """A binary file does not start with the expected magic/header."""


class TruncatedFileError(UvmatchError):
    """A binary file ended before the payload announced by its header."""


class BadDimensionError(UvmatchError):
    """A stored or supplied dimension is outside the allowed range."""


class DimensionMismatchError(UvmatchError):
    """Two inputs that must agree on dimensionality do not."""


class EmptyInputError(UvmatchError):
    """An operation received no data."""


class TooFewDescriptorsError(UvmatchError):
    """Not enough training descriptors for the requested codebook size."""


class NaNInputError(UvmatchError):
    """Input contains NaN or infinite values."""


class DuplicateImageIdError(UvmatchError):
    """The same image id was inserted into an index twice."""


class EmptyIndexError(UvmatchError):
    """A search was issued against an index with no vectors."""


class EmptyDatabaseError(UvmatchError):
    """A query was issued against a BoW database with no images."""


class DegenerateScoresError(UvmatchError):
    """Similarity scores cannot be fitted (all values identical)."""


class InsufficientSamplesError(UvmatchError):
    """Too few usable similarity values for the power-law fit."""


class TooFewMatchesError(UvmatchError):
    """Not enough putative matches to run geometric estimation."""


class GraphTooSmallError(UvmatchError):
    """A graph operation needs more vertices than were supplied."""


class DisconnectedGraphError(UvmatchError):
    """A bisection was requested on a graph that is not connected."""


class UnknownMethodError(UvmatchError):
    """The benchmark was asked to run a method it does not know."""


class ContentHashMismatchError(UvmatchError):
    """A referenced artifact does not match its recorded checksum."""


class InvalidConfigError(UvmatchError):
    """A configuration key or value is not understood."""


class StageError(UvmatchError):
    """A pipeline stage failed.  Carries the stage name for reporting."""

    def __init__(self, stage: str, message: str, index: int | None = None):
        label = stage if index is None else f"{index} ({stage})"
        super().__init__(f"stage {label}: {message}")
        self.stage = stage
        self.index = index
