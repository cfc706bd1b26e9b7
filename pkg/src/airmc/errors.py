"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid shapes, flags, or parameter combinations."""


class DataFormatError(ValueError):
    """Malformed or unparseable input file."""


class NumericalError(RuntimeError):
    """A numerical routine failed to converge or produced non-finite values."""
