"""Exception types shared across the package.

The CLI maps these onto exit codes (config -> 2, data -> 3, numeric -> 4);
plain ValueError is reserved for programming-contract violations such as
shape mismatches.
"""


class ConfigError(Exception):
    """Invalid configuration, unusable CLI arguments, or a missing spec file."""


class DataError(Exception):
    """Malformed or inconsistent on-disk data (images, datasets, checkpoints)."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required (inputs, losses, gradients)."""
