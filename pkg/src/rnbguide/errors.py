"""Exception types shared across the package."""

from __future__ import annotations


class RnbError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(RnbError, ValueError):
    pass


class DegenerateBox(RnbError, ValueError):
    pass


class OddShape(RnbError, ValueError):
    pass


class TooSmall(RnbError, ValueError):
    pass


class EmptyMask(RnbError, ValueError):
    pass


class ZeroUnion(RnbError, ValueError):
    pass


class NonScalarLoss(RnbError, ValueError):
    pass


class NonFiniteGradient(RnbError, ArithmeticError):
    """Raised when the guidance gradient contains NaN or Inf.

    ``step`` is the 1-based sampling step that produced it (0 for the
    initial evaluation) and ``details`` carries a short diagnostic string.
    """

    def __init__(self, step: int, details: str = ""):
        self.step = step
        self.details = details
        super().__init__(f"non-finite gradient at step {step}: {details}")


class ParseError(RnbError, ValueError):
    pass


class ValidationError(RnbError, ValueError):
    pass


class MissingRun(RnbError, LookupError):
    pass
