"""Exception types shared across the package."""


class CflinkError(Exception):
    """Base class for all package errors."""


class ParseError(CflinkError):
    """Malformed text input (bad token, wrong column count)."""


class BoundsError(CflinkError):
    """Node index outside the declared range."""


class ShapeError(CflinkError):
    """Array dimensions disagree with the contract."""


class ConfigError(CflinkError):
    """Invalid configuration value or combination."""


class CapacityError(CflinkError):
    """Request exceeds what the input can supply (samples, ranks, k)."""


class DegenerateInputError(CflinkError):
    """Input is structurally empty for the requested operation."""


class NumericError(CflinkError):
    """Non-finite values or a failed numeric routine."""


class DivergenceError(NumericError):
    """Iterative scheme does not converge for the given parameters."""


class StateError(CflinkError):
    """Operation called on an object in the wrong state."""
