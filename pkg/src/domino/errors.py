"""Exception types shared across the package."""


class DominoError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(DominoError, ValueError):
    """Invalid configuration, catalog, or parameter combination."""


class DegenerateInputError(DominoError, ValueError):
    """Input for which the requested quantity is undefined (e.g. a zero-norm vector)."""


class ContractViolation(DominoError, ValueError):
    """A caller broke an operation's precondition (shape, range, missing argument)."""


class NonFiniteLossError(DominoError, RuntimeError):
    """Training produced a NaN/Inf loss. ``state`` carries the diagnostic dump."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state or {}
