"""Exception types shared across the package."""


class RouletteError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatch(RouletteError):
    """Tensor shapes are incompatible with the requested operation."""


class NonFinite(RouletteError):
    """A NaN or infinity appeared where only finite values are allowed."""


class StaleTape(RouletteError):
    """Backward pass attempted with a tape recorded before a parameter update."""


class CheckpointError(RouletteError):
    """Model checkpoint file is malformed or truncated."""


class Overflow(RouletteError):
    """Exact integer result would exceed the supported range."""


class InvalidClassCount(RouletteError):
    """Class count outside the supported range for key generation."""


class IndexOutOfRange(RouletteError):
    """Class index outside [0, n_classes)."""


class KeyFileError(RouletteError):
    """Key file is malformed or does not encode a derangement."""


class InvalidScale(RouletteError):
    """Non-positive scale passed to a noise sampler."""


class InsufficientSamples(RouletteError):
    """Too few Monte-Carlo samples for a reliable estimate."""


class DegenerateXiWarning(UserWarning):
    """Post-noise sub-network is locally constant; reported budget is zero."""


class ProtocolViolation(RouletteError):
    """Message received or requested outside the allowed protocol order."""


class TransportClosed(RouletteError):
    """Peer closed the connection mid-session."""


class FrameError(RouletteError):
    """Incoming frame failed to decode (bad magic, version, or payload)."""


class KeySpaceTooLarge(RouletteError):
    """Too many candidate mappings to enumerate shadows for."""


class ParseError(RouletteError):
    """CNF input text violates the expected DIMACS structure."""


class TooLarge(RouletteError):
    """Instance exceeds the configured desk-scale limits."""


class BadMagic(RouletteError):
    """IDX file magic number does not match the expected value."""


class CountMismatch(RouletteError):
    """Image and label files disagree on the number of samples."""


class Truncated(RouletteError):
    """File ends before the data promised by its header."""


class UncoveredLabel(RouletteError):
    """Label falls outside the relabeling buckets."""
