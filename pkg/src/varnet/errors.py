"""Exception hierarchy shared by all varnet modules."""


class VarnetError(Exception):
    """Base class for all errors raised by varnet."""


class ContractError(VarnetError, ValueError):
    """Inputs violate a documented precondition (shapes, ranges, ids)."""


class TopologyError(ContractError):
    """Feeder line set is not a tree rooted at the substation."""


class IngestionError(ContractError):
    """A trace or feeder file could not be parsed."""


class ArchitectureMismatch(ContractError):
    """A model file does not fit the requested network architecture."""


class DivergenceError(VarnetError, ArithmeticError):
    """An iterative method produced non-finite or exploding values."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class InfeasibleError(VarnetError):
    """The deterministic OPF has no point satisfying the voltage limits."""
