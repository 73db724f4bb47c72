"""Shared exception types."""


class ShapeError(ValueError):
    """Operand shapes do not conform to the operation's contract."""


class NumericError(ArithmeticError):
    """A non-finite value (NaN/Inf) entered or left a computation."""


class GraphError(RuntimeError):
    """Misuse of the autodiff graph (non-scalar loss, double backward)."""


class ConfigError(ValueError):
    """Invalid or infeasible configuration."""


class DataError(ValueError):
    """Invalid dataset, split, or checkpoint contents."""


class TrainingError(RuntimeError):
    """Training diverged or a required stage artifact is missing."""
