"""Exception types raised across the package."""


class SwingSafeError(Exception):
    """Base class for all package errors."""


class SchemaError(SwingSafeError):
    pass


class UnbalancedInjection(SwingSafeError):
    pass


class DisconnectedGraph(SwingSafeError):
    pass


class NoConvergence(SwingSafeError):
    pass


class Divergence(SwingSafeError):
    pass


class NonFinite(SwingSafeError):
    pass


class SingularF(SwingSafeError):
    """The backward-Euler pencil ``G - T A`` is not invertible."""


class SingularG(SwingSafeError):
    """Forward Euler needs an invertible descriptor matrix (no zero inertia)."""


class LocalityViolation(SwingSafeError):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class OwnershipGap(SwingSafeError):
    pass


class AuditFailure(SwingSafeError):
    def __init__(self, message, offending=()):
        super().__init__(message)
        self.offending = list(offending)


class ScenarioMismatch(SwingSafeError):
    """Two scenarios that should share a case and disturbance do not."""
