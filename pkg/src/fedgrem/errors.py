"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class FedGremError(Exception):
    exit_code = 1


class ContractError(FedGremError, ValueError):
    """Inputs violate a documented precondition (shapes, ranges, variants)."""

    exit_code = 2


class ConfigError(ContractError):
    exit_code = 2


class CapacityError(ContractError):
    """A combinatorial search was asked to exceed its enumeration guard."""

    exit_code = 2


class NumericError(FedGremError, ArithmeticError):
    exit_code = 3


class DegenerateClusterError(NumericError):
    def __init__(self, message, component=None):
        super().__init__(message)
        self.component = component


class ConvergenceError(NumericError):
    """Iterative solver hit its iteration cap.

    The last iterate and its gradient norm are kept so the caller can
    decide whether the point is usable anyway.
    """

    def __init__(self, message, last_iterate=None, grad_norm=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.grad_norm = grad_norm


class InfeasibleError(FedGremError):
    exit_code = 4
