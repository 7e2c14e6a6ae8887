"""Exception hierarchy shared by every meetbeam stage."""

from typing import Optional


class MeetbeamError(Exception):
    """Base class for all errors raised by meetbeam."""


class AudioFormatError(MeetbeamError, ValueError):
    """Malformed or truncated audio file."""


class UnsupportedEncodingError(AudioFormatError):
    """Audio file uses an encoding other than PCM16 or float32."""


class PreconditionError(MeetbeamError, ValueError):
    """An operation was called with inputs violating its precondition."""


class ShapeError(PreconditionError):
    """Array shapes are inconsistent with each other."""


class DegenerateInputError(PreconditionError):
    """Input carries no energy (or is otherwise degenerate)."""


class SegmentTooShortError(PreconditionError):
    """Segment is shorter than the matched filter requires."""


class ConfigError(MeetbeamError, ValueError):
    """Invalid configuration value."""


class PoolError(MeetbeamError, ValueError):
    """Clip pool cannot satisfy the requested mixtures."""


class SingularSystemError(MeetbeamError, ArithmeticError):
    """Linear system is rank deficient."""


class NumericError(MeetbeamError, ArithmeticError):
    """Non-finite values encountered in a numeric stage."""


class ManifestParseError(MeetbeamError, ValueError):
    """A manifest line could not be parsed.

    Args:
        message: What went wrong.
        line_number: 1-based line of the offending record, if known.
    """

    def __init__(self, message: str, line_number: Optional[int] = None) -> None:
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class ManifestVersionError(ManifestParseError):
    """Manifest declares a schema version this build does not read."""


class TranscriptParseError(MeetbeamError, ValueError):
    """A speaker-attributed transcript line is malformed."""
