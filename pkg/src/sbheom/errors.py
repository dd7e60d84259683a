"""Exception hierarchy shared across the package."""


class SBHeomError(Exception):
    """Base class for all package errors."""


class DomainError(SBHeomError, ValueError):
    """An argument lies outside the domain of a function."""


class QuadratureError(SBHeomError):
    """Quadrature failed to reach the requested tolerance.

    The achieved error estimate is kept on ``estimate`` so callers can decide
    whether a looser answer is still usable.
    """

    def __init__(self, message, estimate=None, value=None):
        super().__init__(message)
        self.estimate = estimate
        self.value = value


class StructureError(SBHeomError, ValueError):
    """A basis set violates the pairing rules needed for derivative closure."""


class FitError(SBHeomError, ValueError):
    """Invalid input to the correlation-function fit."""


class GridMismatchError(SBHeomError, ValueError):
    pass


class BudgetExceededError(SBHeomError):
    """The hierarchy would exceed the configured ADO budget."""

    def __init__(self, count, budget):
        super().__init__(
            f"hierarchy needs {count:,} ADOs which exceeds the budget of {budget:,}"
        )
        self.count = count
        self.budget = budget


class DivergenceError(SBHeomError, FloatingPointError):
    """Propagation produced non-finite values."""

    def __init__(self, time, message=None):
        super().__init__(message or f"propagation diverged at t = {time:.6g}")
        self.time = time


class ConfigError(SBHeomError, ValueError):
    """Config schema violation; ``path`` names the offending field."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path
