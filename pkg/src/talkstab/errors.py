"""Exception types raised across the toolkit."""


class TalkstabError(Exception):
    """Base class for all toolkit errors."""


class FormatError(TalkstabError):
    """A file on disk is malformed, truncated or uses an unsupported variant."""


class ValidationError(TalkstabError, ValueError):
    """Inputs violate a precondition (shape, length, range, degeneracy)."""


class DimensionMismatchError(ValidationError):
    pass


class DegenerateInputError(ValidationError):
    """Input is well-formed but the quantity is undefined for it (zero variance, no edges, ...)."""
