"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with inputs violating its contract."""


class ConstructionError(RuntimeError):
    """A verified construction (e.g. a weight function) failed its checks."""

    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = point


class DivergenceError(RuntimeError):
    """An iteration diverged or failed to converge within its budget."""

    def __init__(self, message, history=()):
        super().__init__(message)
        self.history = tuple(history)


class StagnationError(RuntimeError):
    """A least-squares solve stagnated before reaching its tolerance."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class ConfigError(ValueError):
    """A run configuration is malformed or incomplete."""
