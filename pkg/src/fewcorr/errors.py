"""Exception types shared across the package."""


class FewcorrError(Exception):
    """Base class for all package errors."""


class ConfigError(FewcorrError):
    """Invalid configuration value, flag combination, or config file."""


class DataError(FewcorrError):
    """Dataset, manifest, or episode-sampling problem."""


class ShapeError(FewcorrError):
    """Tensor shape or rank mismatch."""


class NumericError(FewcorrError):
    """Non-finite values or other numeric-domain failures."""


class DegenerateVectorError(NumericError):
    """A zero-norm vector where a direction is required."""
