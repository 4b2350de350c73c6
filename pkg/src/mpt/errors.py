"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericalError -> 4.
"""


class MPTError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(MPTError):
    """Invalid configuration value or unknown config key."""


class DataError(MPTError):
    """Invalid dataset, manifest, or sequence contents."""


class FormatError(DataError):
    """Malformed binary container (bad magic, truncation, bogus dims)."""


class NumericalError(MPTError):
    """Numerical contract violation (NaN/Inf where finite values are required)."""


class ShapeError(MPTError, ValueError):
    """Tensor shape mismatch in an operation."""
