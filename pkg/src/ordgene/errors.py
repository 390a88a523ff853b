"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Malformed input: shapes, domains, file contents, configuration."""


class NumericalError(ArithmeticError):
    """A computation left the representable/finite domain."""
