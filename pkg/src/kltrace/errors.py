"""Error taxonomy shared by the library and the CLI.

The CLI maps these onto its exit codes: ConfigError -> 2, DataError -> 3,
NumericalError -> 4. Anything else is a bug and escapes as-is.
"""


class KltraceError(Exception):
    """Base class for all errors raised on purpose by this package."""


class ConfigError(KltraceError):
    """Invalid configuration, parameters, or argument combinations."""


class DataError(KltraceError):
    """Malformed or inconsistent data files / datasets."""


class NumericalError(KltraceError):
    """Numerical failure at run time (divergence, NaN loss, ...)."""
