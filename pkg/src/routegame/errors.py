"""Exception hierarchy shared across the package.

The CLI maps these onto exit statuses: input problems (schema, validation,
configuration, missing entities) exit 2, solver non-convergence exits 3,
and oracle scale limits exit 4.
"""


class RouteGameError(Exception):
    """Base class for all package errors."""


class SchemaError(RouteGameError):
    """A CSV or config file does not match the expected schema."""


class ValidationError(RouteGameError):
    """A value violates a domain invariant (negative token count, bad date, ...)."""

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class ConfigurationError(RouteGameError):
    """Invalid run configuration, e.g. inverted attribute ranges."""


class NotFoundError(RouteGameError):
    """A referenced entity (model, file section) is absent."""


class DegenerateCapacityError(RouteGameError):
    """Capacity derivation hit a zero mean speed or zero total usage."""


class ShapeError(RouteGameError):
    """Array dimensions inconsistent with the market."""


class DegeneracyError(RouteGameError):
    """A solve hit a structurally degenerate configuration (w_q = 0, singular KKT)."""


class ConvergenceError(RouteGameError):
    """Iterative solve failed to reach its tolerance; carries the last gap."""

    def __init__(self, message, gap=None):
        super().__init__(message)
        self.gap = gap


class ScaleError(RouteGameError):
    """Problem exceeds the exact oracle's enumeration bound."""


class NumericalError(RouteGameError):
    """A computation produced non-finite values."""


class SchemaHashError(RouteGameError):
    """Scorer feature schema does not match the market featurizer."""
