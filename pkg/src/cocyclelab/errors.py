"""Exception types raised across the package."""


class CocycleLabError(Exception):
    """Base class for all package errors."""


class WindowTooSmall(CocycleLabError):
    """An orbit window lacks coordinates that an operation needs."""


class ReturnCapExceeded(CocycleLabError):
    """No return to the induced set happened within the return cap."""


class EmptyIndicator(CocycleLabError):
    """No sampled point satisfied the indicator of an induced system."""


class NumericalBreakdown(CocycleLabError):
    """A product became numerically singular (should not happen in SL_d)."""


class InsufficientGap(CocycleLabError):
    """Singular values of a product are not separated enough to read off flags."""


class DegenerateTuple(CocycleLabError):
    """A line tuple does not span R^d."""


class NotTransverse(CocycleLabError):
    """Two flags are not in general position."""


class ConfigError(CocycleLabError, ValueError):
    """A configuration object failed validation."""
