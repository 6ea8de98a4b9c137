"""Exception types shared across the package."""


class FormatError(ValueError):
    """A byte stream or dump file does not conform to the expected layout."""


class ShapeError(ValueError):
    """Operands violate a documented shape contract."""


class ConfigError(ValueError):
    """A configuration value is out of its legal range."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
