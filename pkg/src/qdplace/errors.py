"""
Exceptions raised by qdplace.

Validation problems derive from `ValueError`, solver outcomes from `RuntimeError`.
"""


class InstanceError(ValueError):
    """Invalid topology, instance, demand specification or file record."""


class ParameterError(ValueError):
    """Invalid experiment or command parameter."""


class ModelError(ValueError):
    """A MILP model cannot be built from the given data."""


class DomainError(ValueError):
    """A function is evaluated outside of its domain."""


class SteadyStateError(DomainError):
    """An M/M/1 queue is loaded at or above its service rate."""

    def __init__(self, message, facility=None, load=None, mu=None):
        super().__init__(message)
        self.facility = facility
        self.load = load
        self.mu = mu


class AssignmentError(ValueError):
    """An assignment is inconsistent with its instance."""


class DemandMismatchError(AssignmentError):
    """An assignment does not serve exactly the demand of a client."""

    def __init__(self, message, client=None):
        super().__init__(message)
        self.client = client


class InfeasibleError(RuntimeError):
    """No feasible solution exists."""

    def __init__(self, reason, capacity_sum=None, demand_sum=None):
        super().__init__(reason)
        self.reason = reason
        self.capacity_sum = capacity_sum
        self.demand_sum = demand_sum


class NoConvergenceError(RuntimeError):
    """An iteration or node limit was reached. `best` holds the best report found so far, if any."""

    def __init__(self, message, best=None, gap=None, residual=None):
        super().__init__(message)
        self.best = best
        self.gap = gap
        self.residual = residual


class NumericalError(RuntimeError):
    """The LP engine lost accuracy."""

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class DominanceViolation(AssertionError):
    """A queue-ignoring solution beat the queue-aware one beyond the tie threshold."""

    def __init__(self, message, violations=None):
        super().__init__(message)
        self.violations = violations
