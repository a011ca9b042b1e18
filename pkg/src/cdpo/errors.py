"""Shared exception types."""


class ConfigurationError(ValueError):
    """A config value is outside its documented domain."""


class GenerationError(RuntimeError):
    """Question or dataset generation exhausted its retry budget."""


class DatasetError(RuntimeError):
    """A derived dataset came out empty or structurally invalid."""


class EncodingError(ValueError):
    """A question cannot be packed into the fixed-width feature vector."""


class NumericError(ArithmeticError):
    """Non-finite or degenerate numerics where finite values are required."""
