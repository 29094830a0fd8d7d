"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3, NumericError -> 4.
"""


class CoolError(Exception):
    """Base class for all package errors."""


class ConfigError(CoolError):
    """Invalid configuration: bad keys, bad values, violated invariants."""


class DataError(CoolError):
    """Malformed or inconsistent input data."""


class NumericError(CoolError):
    """Numeric failure at runtime (non-finite loss, degenerate states)."""
