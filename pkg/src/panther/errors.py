"""Exception types shared across the package."""


class PantherError(Exception):
    """Base class for package errors."""


class ParseError(PantherError):
    """A data file line could not be parsed or violates the schema."""


class ConfigError(PantherError):
    """Invalid configuration or incompatible component combination."""


class VocabMismatchError(PantherError):
    """A checkpoint or cache was built against a different vocabulary."""
