class InvalidArgument(ValueError):
    """Raised when an operation receives arguments outside its contract."""


class DegenerateInput(ValueError):
    """Raised when the input is well-formed but numerically degenerate
    (zero rows in a matrix to be normalized, all-zero score sets, ...)."""
