"""Exception and warning types raised across the package."""


class SyncLipError(Exception):
    """Base class for every error raised by synclip."""


class InputTooShort(SyncLipError, ValueError):
    """Input (waveform, track, corpus, pair set) is too short for the request."""


class ConfigMismatch(SyncLipError, ValueError):
    """A configuration value is invalid or disagrees with the data or checkpoint."""


class OutOfRange(SyncLipError, IndexError):
    """A requested window does not fit inside the available data."""


class ShapeError(SyncLipError, ValueError):
    """An array does not have the shape an operation requires."""


class ContractViolation(SyncLipError, RuntimeError):
    """A behavioural contract was broken, e.g. a frozen expert was mutated."""


class FormatError(SyncLipError, ValueError):
    """A container or checkpoint file is malformed, truncated or of an unknown version."""


class MediaError(SyncLipError, OSError):
    """Media could not be decoded or encoded."""


class FrameSkipped(UserWarning):
    """No face was found in a frame; the source frame is passed through unchanged."""
