"""Exception types shared across the package."""


class InputError(ValueError):
    """Malformed or out-of-range input."""


class NumericalError(RuntimeError):
    """A numerical routine failed to converge or hit a degenerate case."""
