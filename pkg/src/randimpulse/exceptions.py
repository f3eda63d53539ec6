"""Exception types raised across the package."""


class RandImpulseError(Exception):
    """Base class for all package errors."""


class InvalidSpec(RandImpulseError, ValueError):
    """A model descriptor or configuration value is malformed."""


class WindowTooSmall(RandImpulseError):
    """The jump search window clips the minimizer of the nonlocal problem."""


class NonFinite(RandImpulseError, FloatingPointError):
    """A numerical evaluation produced NaN or infinity."""


class SingularSystem(RandImpulseError, ArithmeticError):
    """A linear system that should be an M-matrix could not be solved."""


class NoConvergence(RandImpulseError):
    """An iterative solver hit its iteration cap.

    Attributes:
        history: residuals or successive differences recorded before giving up.
    """

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []


class InsufficientData(RandImpulseError, ValueError):
    """Too few points to fit a rate."""


class NegativeIntensity(RandImpulseError, ValueError):
    """An intervention intensity was negative."""


class Diverged(RandImpulseError):
    """Training produced a non-finite parameter or an exploding loss."""


class ParseError(RandImpulseError, ValueError):
    """A run configuration could not be parsed."""
