"""Exception taxonomy. Every error surfaced by the package falls into one of
three classes (config, data, numeric) so the CLI can map them to exit codes."""


class MhcrError(Exception):
    """Base class for all package errors."""


class ConfigError(MhcrError):
    """Invalid configuration value or combination."""


class DataError(MhcrError):
    """Invalid, inconsistent, or missing data."""


class ParseError(DataError):
    """Malformed input file; message names the offending line."""


class ShapeError(DataError):
    """Operand dimensions do not agree."""


class NumericError(MhcrError):
    """Non-finite values encountered during optimization."""
