"""Exception types shared across the package."""


class AllocDesignError(Exception):
    """Base class for all package errors."""


class DataError(AllocDesignError, ValueError):
    """Input data could not be used."""


class ParseError(DataError):
    """A row of a tabular file could not be parsed."""

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class ValidationError(DataError):
    """A parsed value falls outside its allowed range."""

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class ConfigError(AllocDesignError, ValueError):
    """A design or solver configuration is malformed."""


class InfeasibleDesign(AllocDesignError):
    """The constraints admit no assignment policy.

    ``witness`` carries whatever evidence the detector produced, e.g. the
    maximum achievable utility or the label of the offending constraint.
    """

    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


class PolicyFileError(AllocDesignError):
    """A policy file is truncated or otherwise unreadable."""


class PolicyVersionError(PolicyFileError):
    """A policy file carries an unsupported version tag."""
