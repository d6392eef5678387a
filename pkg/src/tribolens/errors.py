"""Exception hierarchy shared by every tribolens module.

The CLI maps these onto exit codes: schema problems exit with 2, numeric
failures with 3 and unconverged searches with 4.
"""


class TriboError(Exception):
    """Base class for all library errors."""

    exit_code = 1
    kind = "error"


class DomainError(TriboError, ValueError):
    """Argument outside the mathematical domain of an operation."""

    exit_code = 2
    kind = "domain"


class ShapeError(TriboError, ValueError):
    """Operand shapes are incompatible."""

    exit_code = 2
    kind = "shape"

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        joined = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class SchemaError(TriboError, ValueError):
    """Input data does not satisfy its declared schema."""

    exit_code = 2
    kind = "schema"


class LookupFailure(TriboError, KeyError):
    """Unknown material, channel or proxy."""

    exit_code = 2
    kind = "lookup"

    def __str__(self):
        return str(self.args[0]) if self.args else "lookup failure"


class AssemblyError(SchemaError):
    """Conflicting entries while assembling block matrices."""

    kind = "assembly"


class SplitError(SchemaError):
    """Not enough observed pairs for the requested split."""

    kind = "split"


class NumericalError(TriboError, ArithmeticError):
    """Non-finite values or divergence during a computation."""

    exit_code = 3
    kind = "numeric"


class NotConvergedError(TriboError):
    """An iterative search ended without meeting its tolerance."""

    exit_code = 4
    kind = "not-converged"


class MeasurementWarning(UserWarning):
    """Raw measurement produced a physically inconsistent coefficient."""
