"""Exception types raised across the package."""


class BatchMFError(Exception):
    """Base class for all package errors."""


class DomainError(BatchMFError, ValueError):
    """A function was evaluated outside its domain."""


class ConfigError(BatchMFError, ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path, reason):
        self.path = path
        self.reason = reason
        super().__init__(f"{path}: {reason}" if path else reason)


class StateSpaceTooLarge(BatchMFError):
    """Exact state enumeration would exceed the configured cap."""

    def __init__(self, cap, what="state space"):
        self.cap = cap
        super().__init__(
            f"{what} exceeds the cap of {cap} states "
            "(raise BATCHMF_STATE_CAP or use the mean-field analysis)"
        )


class NumericalError(BatchMFError, ArithmeticError):
    """A linear solve or integration failed its accuracy checks."""

    def __init__(self, message, residual=None):
        self.residual = residual
        super().__init__(message)


class IntegrationError(NumericalError):
    pass


class ModelError(BatchMFError):
    """The Markov model is malformed (e.g. an absorbing state)."""


class DesignError(BatchMFError, ValueError):
    pass


class FitError(BatchMFError, ValueError):
    pass
