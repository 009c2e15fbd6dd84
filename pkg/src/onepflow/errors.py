"""Exception hierarchy used across the package."""


class OnePFlowError(Exception):
    """Base class for all package errors."""


class DomainError(OnePFlowError, ValueError):
    pass


class ExponentViolation(OnePFlowError, ValueError):
    pass


class StructureViolation(OnePFlowError):
    def __init__(self, condition, witness, margin):
        self.condition = condition
        self.witness = witness
        self.margin = margin
        super().__init__(f"{condition} violated (margin {margin:.3e}) at {witness}")


class SubgradientViolation(OnePFlowError, ValueError):
    pass


class TruncationOrder(OnePFlowError, ValueError):
    pass


class ConvergenceFailure(OnePFlowError, RuntimeError):
    pass


class StagnationFailure(ConvergenceFailure):
    pass


class QuadratureFailure(OnePFlowError, RuntimeError):
    pass


class SizeOverflow(OnePFlowError, ValueError):
    pass


class NonSPD(OnePFlowError, RuntimeError):
    pass


class CylinderOutOfDomain(OnePFlowError, ValueError):
    pass


class MismatchedDiscretization(OnePFlowError, ValueError):
    pass


class ParseError(OnePFlowError, ValueError):
    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(message + suffix)
