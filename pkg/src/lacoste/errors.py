class LacosteError(Exception):
    """Base class for package errors."""


class ArgumentError(LacosteError, ValueError):
    """Inputs violate a shape or range precondition."""


class DataError(LacosteError, ValueError):
    """Input data is malformed or inconsistent."""


class ConfigurationError(LacosteError):
    """A required checkpoint component or config entry is missing."""


class ProviderError(LacosteError):
    """A disparity/depth provider failed."""


class EmptySegmentError(LacosteError):
    """A mask selected for cropping has no foreground pixels."""
