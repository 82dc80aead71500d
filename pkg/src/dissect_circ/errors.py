"""Exception types shared across the toolkit."""


class CircuitToolError(Exception):
    """Base class for all domain errors raised by this package."""


class NetlistError(CircuitToolError):
    """Netlist cannot be parsed or validated.

    Carries the 1-based source line and column when they are known.
    """

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        if line is not None:
            message = f"line {line}" + (f", col {column}" if column is not None else "") + f": {message}"
        super().__init__(message)


class AssembleError(CircuitToolError):
    """Evaluated operator contains non-finite entries."""


class DecouplingError(CircuitToolError):
    """Decoupling could not be constructed for the given system."""


class AssumptionViolation(DecouplingError):
    """A structural assumption of the decoupling fails numerically."""


class IndexTooHigh(DecouplingError):
    """The system is not index 1 or 2; recursion beyond level 2 is unsupported."""


class NoConvergence(CircuitToolError):
    """Newton iteration did not reach tolerance within the iteration budget."""

    def __init__(self, message: str, partial=None):
        super().__init__(message)
        self.partial = partial


class SingularJacobian(CircuitToolError):
    """Newton Jacobian is singular to working precision."""


class GridExhausted(CircuitToolError):
    """Every grid point is already in the training set."""


class ZeroTruthNorm(CircuitToolError):
    """Relative error is undefined for an identically zero reference."""
