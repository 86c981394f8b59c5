"""Exception types shared across the package."""


class UlkError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(UlkError, ValueError):
    """Tensor shapes or channel counts are inconsistent with the operation."""


class ConfigError(UlkError, ValueError):
    """A configuration object violates its invariants."""


class FormatError(UlkError):
    """A weight file is malformed."""


class BadMagicError(FormatError):
    """The file does not start with the ULKW magic bytes."""


class TruncatedError(FormatError):
    """The file ended before the declared payload was complete."""
