"""Exception hierarchy shared by all modules."""


class BridgeError(Exception):
    """Base class for every error raised by chainbridge."""


class ConfigError(BridgeError):
    """Invalid or inconsistent experiment configuration."""


class NumericalError(BridgeError):
    """A computation produced non-finite values or lost definiteness."""


class PreconditionError(BridgeError):
    """An operation was called outside the regime where it is meaningful."""


class AbsoluteContinuityError(PreconditionError):
    """Target mass sits where the reference law has none."""

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class ConvergenceError(BridgeError):
    """An iterative solver stopped before reaching its tolerance."""

    def __init__(self, message, last_iterate=None, history=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.history = history


class InsufficientStatisticsError(BridgeError):
    """Too few Monte Carlo hits to form the requested estimate."""


class InfeasibleError(BridgeError):
    """No path satisfies the chain constraints between the boundary states."""


class ExtrapolationError(BridgeError):
    """Evaluation requested outside the tabulated region."""
