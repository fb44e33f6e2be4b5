"""Exception types shared across the package.

Everything raised on purpose derives from RelgnnError so callers can catch
one base class at the CLI boundary.
"""


class RelgnnError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(RelgnnError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(RelgnnError):
    """A configuration value is missing, unknown, or out of range."""


class ContractError(RelgnnError):
    """A runtime precondition was violated (bad call order, wrong state)."""


class VocabError(RelgnnError):
    """A symbol or relation id falls outside the declared vocabulary."""


class ParseError(RelgnnError):
    """A serialized graph, dataset, or log file is malformed."""
