"""Exception hierarchy shared by all driftlab modules."""


class DriftlabError(Exception):
    """Base class for every error raised by driftlab."""


class DomainError(DriftlabError, ValueError):
    """A time or state argument lies outside the admissible domain."""


class ScheduleError(DriftlabError, ValueError):
    """A noise schedule violates one of its validity conditions."""


class InfiniteSnrError(DomainError):
    """Log-SNR requested at a time where sigma vanishes."""


class UnsupportedError(DriftlabError, NotImplementedError):
    """Operation not defined for this schedule kind or parameterization."""


class NumericError(DriftlabError, ArithmeticError):
    """A numerical routine failed to converge or produced non-finite values."""


class ConversionError(DriftlabError, ValueError):
    """A parameterization conversion is singular at the requested time."""


class ConfigError(DriftlabError, ValueError):
    """Invalid configuration, shapes or hyperparameters."""


class GridError(DriftlabError, ValueError):
    """A time grid is degenerate (not strictly monotone or out of range)."""


class VocabularyError(DriftlabError, KeyError):
    """A token is not part of the vocabulary."""


class DataError(DriftlabError, ValueError):
    """Input data is empty or malformed."""
