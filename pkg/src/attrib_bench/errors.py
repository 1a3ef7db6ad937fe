"""Exception types shared across the package.

Each maps to a CLI exit code: ConfigError -> 2, FormatError -> 3,
NumericError -> 4.
"""


class ConfigError(ValueError):
    """Bad run configuration: unknown names, invalid values, missing inputs."""


class FormatError(ValueError):
    """Malformed or incompatible on-disk artifact (magic, version, truncation)."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required (diverged training, NaN maps)."""


class ShapeError(ValueError):
    """Tensor operands with incompatible dimensions."""
