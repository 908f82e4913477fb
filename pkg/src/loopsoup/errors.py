"""Exception hierarchy shared by every module of the package."""

from __future__ import annotations


class LoopSoupError(Exception):
    """Base class for all errors raised by loopsoup."""


class GraphError(LoopSoupError, ValueError):
    """Invalid graph input."""


class DisconnectedGraph(GraphError):
    pass


class NonPositiveConductance(GraphError):
    pass


class AllKillingZeroWithoutOverride(GraphError):
    pass


class SingularSystem(LoopSoupError, ArithmeticError):
    pass


class ExcessiveH(LoopSoupError, ValueError):
    """The function passed to an h-transform is not excessive, i.e. (P - I)h > 0 somewhere."""


class NonAdjacentStep(LoopSoupError, ValueError):
    pass


class NotPrimitive(LoopSoupError, ValueError):
    pass


class BudgetExceeded(LoopSoupError, RuntimeError):
    pass


class TooLarge(LoopSoupError, ValueError):
    pass


class TooLargeForExactSum(TooLarge):
    pass


class JTooSmall(LoopSoupError, ValueError):
    pass


class EdgeInsideBlock(LoopSoupError, ValueError):
    pass


class OutOfRange(LoopSoupError, ValueError):
    pass


class NumericalMismatch(LoopSoupError, ArithmeticError):
    """Two evaluations of the same quantity disagree beyond tolerance."""


class NoKilling(LoopSoupError, ValueError):
    pass


class PlanMismatch(LoopSoupError, ValueError):
    pass


class NonUniformKilling(LoopSoupError, ValueError):
    pass


class BadIntervalPartition(LoopSoupError, ValueError):
    pass


class UnstableSum(LoopSoupError, ArithmeticError):
    pass


class NegativeMass(LoopSoupError, ArithmeticError):
    pass


class QuadratureFailure(LoopSoupError, ArithmeticError):
    pass


class NoSignChange(LoopSoupError, RuntimeError):
    pass


class ConfigInvalid(LoopSoupError, ValueError):
    pass


class VerificationFailed(LoopSoupError, AssertionError):
    pass


class IOFailure(LoopSoupError, OSError):
    pass
