"""Exception types shared across the package."""


class PulseError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(PulseError):
    """A container file is malformed: bad magic, manifest, or version."""


class ShapeError(FormatError):
    """An array in a container or operation has the wrong shape."""


class InvariantError(PulseError):
    """A domain invariant was violated (labels, stats, partitions)."""


class NumericsError(PulseError):
    """Non-finite values encountered where finite ones are required."""


class ConfigError(PulseError):
    """Invalid configuration or command-line arguments."""
