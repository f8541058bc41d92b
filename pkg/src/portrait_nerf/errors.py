"""Exception types raised across the package."""


class PortraitNerfError(Exception):
    """Base class for all package errors."""


class DegenerateFrame(PortraitNerfError, ValueError):
    pass


class OutOfBounds(PortraitNerfError, IndexError):
    pass


class NonFinite(PortraitNerfError, FloatingPointError):
    pass


class NonMonotonicDepths(PortraitNerfError, ValueError):
    pass


class DegenerateConfiguration(PortraitNerfError, ValueError):
    pass


class MismatchedLabels(PortraitNerfError, ValueError):
    pass


class DimensionMismatch(PortraitNerfError, ValueError):
    pass


class TooSmall(PortraitNerfError, ValueError):
    pass


class ConfigError(PortraitNerfError, ValueError):
    pass


class DatasetError(PortraitNerfError, OSError):
    pass


class VersionMismatch(DatasetError):
    pass


class ChecksumMismatch(DatasetError):
    pass
