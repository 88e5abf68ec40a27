"""Exception types raised across the package."""


class ConfigurationError(ValueError):
    """Invalid parameters for a sampler, pair or estimator."""


class UnsupportedConfigurationError(ConfigurationError):
    """A valid combination of options that no implemented method covers."""


class DomainError(ValueError):
    """An argument lies outside the domain of a numerical function."""


class TailUnderflowError(ArithmeticError):
    """A conditioning event has probability that underflows double precision.

    Callers are expected to catch this and report a zero bound certified by
    the (underflowed) event probability instead of attempting to sample.
    """


class GridOverflowError(RuntimeError):
    """A discretized distribution outgrew the allowed support size."""
