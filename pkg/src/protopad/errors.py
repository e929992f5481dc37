"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
NumericalError -> 3.
"""


class ProtopadError(Exception):
    """Base class for package errors."""


class ConfigError(ProtopadError, ValueError):
    """Invalid run configuration (bad field, missing section, bad value)."""


class DataError(ProtopadError, ValueError):
    """Malformed input data or a dataset that cannot satisfy a request."""


class NumericalError(ProtopadError, RuntimeError):
    """A computation produced non-finite values."""
