"""Exception types shared across the package."""


class StgiaError(Exception):
    """Base class for all package errors."""


class InputError(StgiaError, ValueError):
    """A caller passed values outside an operation's domain."""


class ConfigurationError(StgiaError, ValueError):
    """Structurally invalid object: bad graph, mismatched shapes, bad config."""


class LogicError(StgiaError, RuntimeError):
    """Calling code violated an internal protocol contract."""


class NumericError(StgiaError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class BudgetExhausted(StgiaError):
    """Remaining privacy budget fell below the floor; caller decides how to stop."""
