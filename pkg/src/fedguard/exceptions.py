"""Exception hierarchy shared by every fedguard module."""


class FedGuardError(Exception):
    """Base class for all fedguard errors."""


class ConfigError(FedGuardError, ValueError):
    """Invalid configuration, model spec or partition arithmetic."""


class ShapeError(FedGuardError, ValueError):
    """Array shapes do not match what an operation expects."""


class DomainError(FedGuardError, ValueError):
    """An argument lies outside the domain of an operation (empty batch, n < classes, ...)."""


class FormatError(FedGuardError, ValueError):
    """Malformed IDX or parameter file."""


class NumericError(FedGuardError, ArithmeticError):
    """A non-finite value appeared in a computation."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class ProtocolError(FedGuardError, RuntimeError):
    """The federated protocol cannot continue (e.g. every client is banned)."""
