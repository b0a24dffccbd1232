"""Exception types raised across the package."""


class QuantError(Exception):
    """Base class for all package errors."""


class InvalidInput(QuantError, ValueError):
    pass


class ShapeError(QuantError, ValueError):
    pass


class Unsupported(QuantError, NotImplementedError):
    pass


class InvalidConfig(QuantError, ValueError):
    pass


class OverflowViolation(QuantError, ArithmeticError):
    """A value that the protective range should have kept in int8 escaped it."""


class LaneOverflow(QuantError, OverflowError):
    """A per-lane product left its 8-bit lane and would carry into a neighbour."""


class AccumulatorOverflow(QuantError, OverflowError):
    pass


class EmptyCache(QuantError, LookupError):
    pass


class FormatError(QuantError, ValueError):
    """Malformed tensor container."""
