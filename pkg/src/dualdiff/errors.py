"""Exception types raised across the package."""


class ConfigError(ValueError):
    """Invalid configuration value, key or file."""


class ContractError(ValueError):
    """A caller broke a documented precondition (shape, range, ordering)."""


class NumericalError(ArithmeticError):
    """A loss or update became non-finite."""

    def __init__(self, message, term=None, step=None):
        super().__init__(message)
        self.term = term
        self.step = step


class CheckpointError(IOError):
    """Unreadable, truncated or version-mismatched checkpoint."""
