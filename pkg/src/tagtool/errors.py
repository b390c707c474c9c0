"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit 1, malformed
or inconsistent data exits 2, numerical failures exit 3.
"""


class TagtoolError(Exception):
    """Base class for all package errors."""


class ConfigError(TagtoolError):
    """Invalid or inconsistent configuration (bad field, bad profile, ...)."""


class DataError(TagtoolError):
    """Malformed input data: bad file headers, shape mismatches, empty inputs."""


class NumericalError(TagtoolError):
    """Numerical failure: NaN/Inf losses, diverging optimization, bad geometry."""
