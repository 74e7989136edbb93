"""Exception types shared across the package."""


class TensorFormatError(ValueError):
    """A tensor file or container is malformed, truncated, or carries invalid values."""


class NumericalError(RuntimeError):
    """A numerical routine cannot produce a trustworthy result."""
