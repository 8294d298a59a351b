"""Exception types shared across the package."""


class ShapeError(ValueError):
    """An operand's shape violates an operation's contract."""


class FormatError(ValueError):
    """A binary file (weights, chips) is malformed or truncated."""


class ConfigError(ValueError):
    """A configuration value or key is invalid."""
